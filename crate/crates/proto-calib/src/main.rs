use clap::Parser;

use proto_calib::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) =
        cli::init_threads().and_then(|()| cli::resolve(cli.command).and_then(cli::execute))
    {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}
