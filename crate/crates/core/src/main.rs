fn main() {
    std::process::exit(hessreg::cli::run(std::env::args_os()));
}
