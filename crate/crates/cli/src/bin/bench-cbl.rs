use std::process::ExitCode;

fn main() -> ExitCode {
    adrs_bench::protocol::run_evaluator("bench-cbl", adrs_bench::cbl::eval::evaluate)
}
