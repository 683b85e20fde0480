#![no_main]

use klq_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(again, cfg);
        }
    }
});
