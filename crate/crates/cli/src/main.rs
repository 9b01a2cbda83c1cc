use std::io;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let env_seed = std::env::var(otfs::config::SEED_ENV).ok();
    let code = otfs_cli::run(&args, env_seed.as_deref(), &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code);
}
