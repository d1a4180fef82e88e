fn main() -> std::process::ExitCode {
    grader_service::cli::main()
}
