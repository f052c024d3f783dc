use clap::error::ErrorKind;
use clap::Parser;

use fieldforge::Cli;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = fieldforge::run(cli) {
        eprintln!("fieldforge: {err}");
        std::process::exit(err.exit_code());
    }
}
