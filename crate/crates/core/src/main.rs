fn main() -> std::process::ExitCode {
    paka::cli::main_with(std::env::args_os())
}
