#![no_main]

use libfuzzer_sys::fuzz_target;
use qef_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let _ = cfg.echo();
        let _ = cfg.rate_config();
        let _ = cfg.theta_values();
        let _ = cfg.horizons();
    }
});
