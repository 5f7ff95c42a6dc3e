use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = raymap_cli::Cli::parse();
    match raymap_cli::run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("raymap: {e}");
            std::process::exit(raymap_cli::exit_code(&e));
        }
    }
}
