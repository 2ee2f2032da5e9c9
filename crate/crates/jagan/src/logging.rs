use std::io::Write;

use log::LevelFilter;

/// Installs the global logger writing to stderr, as plain text or JSON lines.
pub fn init(level: LevelFilter, json: bool) {
    let mut b = env_logger::Builder::new();
    b.filter_level(level).target(env_logger::Target::Stderr);
    if json {
        b.format(|buf, record| {
            let line = serde_json::json!({
                "ts": crate::manifest::unix_now(),
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    } else {
        b.format(|buf, record| {
            writeln!(
                buf,
                "[{} {}] {}",
                record.level(),
                record.target(),
                record.args()
            )
        });
    }
    let _ = b.try_init();
}
