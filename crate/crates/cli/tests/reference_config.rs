use dail_cli::RunConfig;

#[test]
fn shipped_reference_config_matches_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.conf");
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    let keys = text
        .lines()
        .filter(|l| l.contains('=') && !l.trim_start().starts_with('#'))
        .count();
    assert_eq!(keys, RunConfig::default().render().lines().count());
}
