fn main() -> std::process::ExitCode {
    geotex::cli::main_with_args(std::env::args_os())
}
