use std::process::ExitCode;

#[global_allocator]
static ALLOC: regla::memory::CountingAlloc = regla::memory::CountingAlloc;

fn main() -> ExitCode {
    regla::cli::init_threads_from_env();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = regla::cli::run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock());
    ExitCode::from(code)
}
