fn main() -> std::process::ExitCode {
    personaprompt::cli::main()
}
