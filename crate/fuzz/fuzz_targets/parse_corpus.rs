#![no_main]

use layertie::data::Corpus;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Corpus::from_bytes(data.to_vec(), 0.1) {
        let m = c.metadata();
        assert_eq!(m.train_tokens + m.val_tokens, m.total_tokens);
        assert_eq!(m.total_tokens, data.len());
    }
});
