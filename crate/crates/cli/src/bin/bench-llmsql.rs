use std::process::ExitCode;

fn main() -> ExitCode {
    adrs_bench::protocol::run_evaluator("bench-llmsql", adrs_bench::llmsql::evaluate)
}
