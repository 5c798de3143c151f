#![no_main]

use kflow::io::{read_particles, write_particles};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = read_particles(data) {
        assert!(p.weights().iter().all(|w| w.is_finite() && *w >= 0.0));
        let mut out = Vec::new();
        write_particles(&p, &mut out).unwrap();
        let again = read_particles(out.as_slice()).unwrap();
        assert_eq!(again.weights(), p.weights());
        assert_eq!(again.positions(), p.positions());
    }
});
