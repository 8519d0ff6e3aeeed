//! Figures built from a seed directory.

use std::path::Path;

use pinnx_core::metrics::grad_norm_profile;
use pinnx_core::pde::{sample_in, CollocationSet, Region};
use pinnx_core::refsolver::ReferenceGrid;
use pinnx_core::trainer::{rng_for, Stream, TlMethod};

use crate::error::Result;
use crate::plot::{grad_bars, line_plot, scatter_plot, Series};
use crate::rundir::{read_selected, read_snapshot, SeedPaths};
use crate::runner::{load_reference, seed_model};

/// Reference, initial model and (when present) the transferred model at the
/// grid time nearest `t`.
pub fn slice_figure(seed_dir: &Path, grid: &ReferenceGrid, t: f64, method: Option<TlMethod>) -> Result<String> {
    let ti = grid.time_index(t);
    let tt = grid.t[ti];
    let pts: Vec<(f64, f64)> = grid.x.iter().map(|&x| (tt, x)).collect();
    let pair = |vals: &[f64]| grid.x.iter().copied().zip(vals.iter().copied()).collect::<Vec<_>>();
    let mut series = vec![Series { label: "reference".into(), points: pair(grid.row(ti)), dashed: false }];
    let initial = seed_model(seed_dir, None)?;
    series.push(Series { label: "without TL".into(), points: pair(&initial.predict(&pts)?), dashed: true });
    if let Some(m) = method {
        let after = seed_model(seed_dir, Some(m))?;
        series.push(Series { label: format!("with TL ({})", m.name()), points: pair(&after.predict(&pts)?), dashed: true });
    }
    let title = format!("{} {} at t = {tt:.3}", grid.equation, initial.arch.final_activation().label());
    Ok(line_plot(&title, "x", "u(t, x)", &series))
}

pub fn scatter_figure(seed_dir: &Path) -> Result<String> {
    let paths = SeedPaths::new(seed_dir.to_path_buf());
    let pts = read_selected(&paths.selected())?;
    let (cfg, seed) = read_snapshot(&paths.config())?;
    let title = format!("{} selected points, seed {seed}", cfg.name);
    Ok(scatter_plot(&title, &pts, (cfg.split.t_train, cfg.split.t_val)))
}

/// Gradient norms of the initial model's PDE loss on its own training points.
pub fn gradnorm_figure(seed_dir: &Path) -> Result<String> {
    let paths = SeedPaths::new(seed_dir.to_path_buf());
    let (cfg, seed) = read_snapshot(&paths.config())?;
    let model = seed_model(seed_dir, None)?;
    let colloc = CollocationSet::uniform(
        &mut rng_for(seed, Stream::Collocation),
        cfg.initial.collocation_points,
        0.0,
        cfg.split.t_train,
        Region::Train,
    );
    let boundary: Option<Vec<f64>> = model.problem.needs_boundary_loss().then(|| {
        let mut rng = rng_for(seed, Stream::Boundary);
        (0..cfg.initial.boundary_points).map(|_| sample_in(&mut rng, 0.0, cfg.split.t_train, false)).collect()
    });
    let layers = grad_norm_profile(&model, &colloc, boundary.as_deref())?;
    Ok(grad_bars(&format!("{} layer-wise gradient norms, seed {seed}", cfg.name), &layers))
}

/// Reference grid of the experiment a seed directory belongs to.
pub fn seed_reference(seed_dir: &Path) -> Result<ReferenceGrid> {
    let (cfg, _) = read_snapshot(&SeedPaths::new(seed_dir.to_path_buf()).config())?;
    load_reference(&cfg)
}
