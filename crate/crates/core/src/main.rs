use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use dvps::cli::{self, Cli, RUN_LOG};

// stderr plus the run directory's log file
struct Tee(Option<File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = &mut self.0 {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        if let Some(f) = &mut self.0 {
            f.flush()?;
        }
        Ok(())
    }
}

fn init_logging(dir: Option<&Path>) {
    let file = dir.and_then(|d| {
        std::fs::create_dir_all(d).ok()?;
        File::create(d.join(RUN_LOG)).ok()
    });
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DVPS_LOG", "info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .init();
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DVPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("DVPS_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    init_logging(args.command.out_dir());
    if let Err(e) = init_threads() {
        log::error!("{e}");
        return ExitCode::from(1);
    }
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
