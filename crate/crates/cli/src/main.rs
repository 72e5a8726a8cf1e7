use clap::Parser;
use connectome_cli::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = connectome_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
