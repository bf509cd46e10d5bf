use std::process::ExitCode;

fn main() -> ExitCode {
    adrs_bench::protocol::run_evaluator("bench-eplb", adrs_bench::eplb::evaluate)
}
