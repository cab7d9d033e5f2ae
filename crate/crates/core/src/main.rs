fn main() -> std::process::ExitCode {
    bombworks::cli::main()
}
