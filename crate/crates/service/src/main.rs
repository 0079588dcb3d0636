fn main() -> std::process::ExitCode {
    crowdlab::cli::main()
}
