fn main() {
    print!("{}", softshift::harness::ExperimentConfig::default().to_text());
}
