fn main() -> std::process::ExitCode {
    avfusion::cli::main()
}
