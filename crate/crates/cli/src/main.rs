use clap::Parser;
use dklvae_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            // One line, `error[<category>]: <message>`, for scripts.
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            std::process::exit(e.exit_code());
        }
    }
}
