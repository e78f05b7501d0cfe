//! Saves a trainer mid-run, reloads it, and shows that the file format is
//! stable (save → load → save gives the same bytes) and that a checkpoint
//! for a different network shape is refused with the list of differences.

use dpn::trainer::{Checkpoint, TrainConfig, Trainer};

fn main() -> dpn::Result<()> {
    let cfg = TrainConfig::from_toml_str(
        "env_size = 8\nenv_goals = 1\nworkers = 2\nconv_channels = 4\nz_dim = 16\nh_outer = 16\nh_inner = 16\nT = 2\nsequential = true\n",
        &[],
    )?;
    let mut t = Trainer::new(cfg.clone())?;
    for _ in 0..20 {
        t.step()?;
    }
    let dir = std::env::temp_dir().join("dpn_checkpoint_roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| dpn::Error::io(&dir, e))?;
    let path = dir.join("checkpoint.bin");
    t.checkpoint().save(&path)?;
    let first = std::fs::read(&path).map_err(|e| dpn::Error::io(&path, e))?;
    let again = Checkpoint::load(&path)?.to_bytes();
    println!("{} bytes, {} parameters, identical after reload: {}", first.len(), t.params.numel(), first == again);

    let resumed = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
    println!("resumed at iteration {}, {} env steps", resumed.iteration, resumed.env_steps);

    let wider = TrainConfig::from_toml_str(&cfg.to_toml_string(), &["z_dim=24".into()])?;
    match Checkpoint::load(&path)?.check_against(&Trainer::new(wider)?.params) {
        Ok(()) => println!("unexpected: shapes matched"),
        Err(e) => println!("refused: {e}"),
    }
    Ok(())
}
