use clap::Parser;

fn main() {
    let cli = tinytrain_cli::Cli::parse();
    match tinytrain_cli::run(cli) {
        Ok(message) => println!("{message}"),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(tinytrain_cli::exit_code(&err));
        }
    }
}
