#![no_main]

use layertie::qcontroller::QNet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((net, header)) = QNet::decode_checkpoint(data) {
        let bytes = net.encode_checkpoint(header.step);
        let (again, _) = QNet::decode_checkpoint(&bytes).unwrap();
        assert_eq!(again.params(), net.params());
    }
});
