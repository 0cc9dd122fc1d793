#![no_main]
//! Input layout: u32 little-endian manifest length, manifest JSON, payload.

use layertie::model::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
    let body = &data[4..];
    if n > body.len() {
        return;
    }
    let (manifest, payload) = body.split_at(n);
    if let Ok(store) = checkpoint::decode_bytes::<f32>(manifest, payload) {
        let (m, p) = checkpoint::encode(&store, 0);
        let again = checkpoint::decode::<f32>(&m, &p).unwrap();
        assert_eq!(again.tying(), store.tying());
        assert_eq!(again.globals(), store.globals());
    }
    let _ = checkpoint::decode_bytes::<f64>(manifest, payload);
});
