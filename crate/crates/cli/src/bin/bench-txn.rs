use std::process::ExitCode;

fn main() -> ExitCode {
    adrs_bench::protocol::run_evaluator("bench-txn", adrs_bench::txn::evaluate)
}
