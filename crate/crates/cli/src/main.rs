use clap::Parser;
use sparseprop_cli::{bench, summarize, train_cmd, Cli, Command};

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Bench(args) => {
            let records = bench(&args)?;
            println!("{} records written to {}", records.len(), args.out.display());
            for line in summarize(&records) {
                println!("{line}");
            }
        }
        Command::Train(args) => {
            let r = train_cmd(&args)?;
            println!(
                "{} steps, loss {:.4} -> {:.4}, sparsity {:.4} (all weights {:.4}); report at {}",
                r.steps,
                r.initial_loss,
                r.final_loss,
                r.sparsity,
                r.total_sparsity,
                args.out.display()
            );
        }
    }
    Ok(())
}
