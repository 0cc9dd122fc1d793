#![no_main]

use layertie::ablations::Permutation;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = Permutation::from_json(data) {
        let mut seen = vec![false; p.len()];
        for i in 0..p.len() {
            let j = p.apply(i);
            assert!(!seen[j]);
            seen[j] = true;
        }
    }
});
