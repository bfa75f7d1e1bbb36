use clap::Parser;

fn main() {
    let args = match bonefield::cli::CliArgs::try_parse() {
        Ok(a) => a,
        Err(e) => {
            // clap renders its own help/usage text
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            std::process::exit(code);
        }
    };
    if let Err(e) = bonefield::cli::run(args) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.exit_code);
    }
}
