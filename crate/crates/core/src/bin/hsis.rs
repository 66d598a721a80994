fn main() -> std::process::ExitCode {
    household_sis::cli::main_with_args(std::env::args_os())
}
