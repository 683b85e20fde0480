#![no_main]

use klq_core::io::{parse_mdp, write_mdp};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(mdp) = parse_mdp(data) {
        let mut buf = Vec::new();
        write_mdp(&mdp, &mut buf).unwrap();
        assert_eq!(parse_mdp(buf.as_slice()).unwrap(), mdp);
    }
});
