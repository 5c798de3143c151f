#![no_main]

use kflow::io::{read_grid_measure, write_grid_measure};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = read_grid_measure(data) {
        assert!(m.density().iter().all(|v| v.is_finite() && *v >= 0.0));
        let mut out = Vec::new();
        write_grid_measure(&m, &mut out).unwrap();
        let again = read_grid_measure(out.as_slice()).unwrap();
        assert_eq!(again.density(), m.density());
    }
});
