//! Planning cost in state transitions: exhaustive tree expansion, fixed
//! per-action rollouts, and the planning network's one transition per step.

use dpn::cli::run_bench;

fn main() -> dpn::Result<()> {
    println!("{}\n", run_bench(4, 3, 3, 3)?);
    println!("{:>3} {:>5} {:>14} {:>14} {:>6} {:>10}", "|A|", "depth", "tree", "rollouts(L=d)", "dpn", "saved");
    for actions in [2, 4, 8] {
        for depth in 1..=5 {
            let t = run_bench(actions, depth, depth, depth)?;
            println!(
                "{:>3} {:>5} {:>14} {:>14} {:>6} {:>9.1}%",
                actions, depth, t.exhaustive_tree, t.fixed_rollouts, t.dpn, t.reduction_pct
            );
        }
    }
    Ok(())
}
