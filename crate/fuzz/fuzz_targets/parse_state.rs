#![no_main]
//! JSON tying states and action vectors.

use layertie::tying::{canonicalize, ActionVector, TyingState};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = serde_json::from_slice::<TyingState>(data) {
        let back = serde_json::to_vec(&s).unwrap();
        assert_eq!(serde_json::from_slice::<TyingState>(&back).unwrap(), s);
    }
    if let Ok(a) = serde_json::from_slice::<ActionVector>(data) {
        let s = canonicalize(&a);
        assert!(TyingState::new(s.as_slice().to_vec()).is_ok());
        assert_eq!(s.n_layers(), a.n_layers());
    }
});
