use std::io::Write;

use log::LevelFilter;

/// Human-readable lines by default, NDJSON records with `json`. `RUST_LOG` still
/// overrides the level.
pub fn init(quiet: bool, json: bool) {
    let mut b = env_logger::Builder::new();
    b.filter_level(if quiet { LevelFilter::Warn } else { LevelFilter::Info });
    b.parse_default_env();
    if json {
        b.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    } else {
        b.format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()));
    }
    let _ = b.try_init();
}
