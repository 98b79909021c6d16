use csiqa::cli::{main_with, Io};

fn main() {
    let (mut out, mut log) = (std::io::stdout(), std::io::stderr());
    let code = main_with(std::env::args_os(), &mut Io { out: &mut out, log: &mut log });
    std::process::exit(code);
}
