fn main() -> std::process::ExitCode {
    factoidqa::cli::run()
}
