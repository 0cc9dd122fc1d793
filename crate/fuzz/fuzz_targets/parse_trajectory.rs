#![no_main]
//! Trajectory JSON-lines, then schedule construction from whatever parsed.

use layertie::ablations::ReplaySchedule;
use layertie::trainer::read_trajectory_bytes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(records) = read_trajectory_bytes(data) else { return };
    let Some(first) = records.first() else { return };
    let n = first.state.n_layers();
    if let Ok(schedule) = ReplaySchedule::from_trajectory(&records, n, None) {
        assert_eq!(schedule.entries.len(), records.len());
    }
});
