fn main() -> std::process::ExitCode {
    s4_core::cli::main()
}
