//! Stage 3a: refine a deformable tetrahedral surface, initialized from the
//! coarse density, against front/back normal maps and silhouettes.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use super::backview::load_back_view;
use super::coarse::{field_path, load_coarse_field};
use super::preprocess::{load_reference, resize_bundle};
use super::{check_finite, require_file, write_manifest, Run, StageStatus, BACKVIEW_DIR, GEOMETRY_DIR, PREPROCESS_DIR};
use crate::error::{Error, Result};
use crate::field::DensityField;
use crate::losses::{geometry_loss, mask_loss, stage_loss, LossLog, SmoothWeights, Stage};
use crate::mesh::{init_sdf_from_density, marching_tets, read_obj, render_normals, write_obj, write_ply, TetGrid};
use crate::mesh::TriMesh;
use crate::optim::Adam;
use crate::scene::{encode_normals, Camera, Image, Vec3};

pub const STAGE: &str = "geometry";

pub fn mesh_path(run: &Run) -> PathBuf {
    run.dir(GEOMETRY_DIR).join("mesh.obj")
}

pub fn state_path(run: &Run) -> PathBuf {
    run.dir(GEOMETRY_DIR).join("state.ctxs")
}

pub fn load_mesh(run: &Run) -> Result<TriMesh> {
    let p = mesh_path(run);
    require_file(&p, "fine-geo")?;
    read_obj(&p)
}

/// Normal and silhouette targets for the front and back cameras.
#[derive(Debug, Clone)]
pub struct GeometryTargets {
    pub front_cam: Camera,
    pub back_cam: Camera,
    pub front_normal: Image,
    pub front_alpha: Image,
    pub back_normal: Image,
    pub back_alpha: Image,
}

/// Grid parameters flattened as `[sdf..., deform_raw (xyz)...]`.
pub fn grid_params(grid: &TetGrid) -> Vec<f64> {
    let mut p = grid.sdf.clone();
    for d in &grid.deform_raw {
        p.extend_from_slice(d.as_slice());
    }
    p
}

pub fn set_grid_params(grid: &mut TetGrid, params: &[f64]) -> Result<()> {
    let m = grid.num_vertices();
    if params.len() != 4 * m {
        return Err(Error::ShapeMismatch(format!("grid expects {} parameters, got {}", 4 * m, params.len())));
    }
    grid.sdf.copy_from_slice(&params[..m]);
    for (v, d) in grid.deform_raw.iter_mut().enumerate() {
        *d = Vec3::new(params[m + 3 * v], params[m + 3 * v + 1], params[m + 3 * v + 2]);
    }
    Ok(())
}

/// Tet grid over the coarse field's box with the surface at density `threshold`.
pub fn init_grid<F: DensityField>(resolution: usize, bound: f64, field: &F, threshold: f64) -> Result<TetGrid> {
    let mut grid = TetGrid::new(resolution, crate::field::Aabb::cube(bound))?;
    init_sdf_from_density(&mut grid, field, threshold)?;
    Ok(grid)
}

pub struct GeometryStep {
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    pub grad: Vec<f64>,
    pub mesh: TriMesh,
}

pub fn geometry_step(run: &Run, grid: &TetGrid, targets: &GeometryTargets, step: usize) -> Result<GeometryStep> {
    let [(_, w_normal), (_, w_mask), (_, w_lap), (_, w_smooth)] = run.cfg.weights.active(Stage::Geometry, step);
    let ext = marching_tets(grid)?;
    let mesh = &ext.mesh;
    let front = render_normals(mesh, &targets.front_cam);
    let back = render_normals(mesh, &targets.back_cam);
    let geo = geometry_loss(
        &targets.front_normal,
        &front.normal,
        Some(&targets.back_normal),
        &back.normal,
        mesh,
        SmoothWeights {
            laplacian: w_lap,
            consistency: w_smooth,
        },
    )?;
    let mask_front = mask_loss(&targets.front_alpha, &front.alpha)?;
    let mask_back = mask_loss(&targets.back_alpha, &back.alpha)?;

    let mut components = BTreeMap::new();
    components.insert("normal".to_string(), geo.front.value + geo.back.value);
    components.insert("mask".to_string(), mask_front.value + mask_back.value);
    components.insert("laplacian".to_string(), geo.laplacian);
    components.insert("smooth".to_string(), geo.consistency);
    let total = stage_loss(Stage::Geometry, &components, &run.cfg.weights, step)?;

    let scaled = |img: &Image, w: f64| img.map(|v| v * w);
    let mut g_verts = geo.smooth_grad.clone();
    for (render, cam, gn, ga) in [
        (&front, &targets.front_cam, &geo.front.grad, &mask_front.grad),
        (&back, &targets.back_cam, &geo.back.grad, &mask_back.grad),
    ] {
        let g = render.backward(mesh, cam, Some(&scaled(gn, w_normal)), Some(&scaled(ga, w_mask)));
        for (a, b) in g_verts.iter_mut().zip(g) {
            *a += b;
        }
    }
    let (g_sdf, g_raw) = ext.backward(grid, &g_verts);
    let mut grad = g_sdf;
    for g in g_raw {
        grad.extend_from_slice(g.as_slice());
    }
    Ok(GeometryStep {
        components,
        total,
        grad,
        mesh: ext.mesh,
    })
}

/// Loads front targets from preprocessing and back targets from the back view.
pub fn load_targets(run: &Run) -> Result<GeometryTargets> {
    let res = run.cfg.geometry.resolution;
    let front = resize_bundle(&load_reference(run)?, res);
    let back = resize_bundle(&load_back_view(run)?, res);
    let front_cam = run.reference_camera(res)?;
    Ok(GeometryTargets {
        back_cam: front_cam.back_view(),
        front_cam,
        front_normal: front.normal.unwrap(),
        front_alpha: front.alpha,
        back_normal: back.normal.unwrap(),
        back_alpha: back.alpha,
    })
}

/// Optimizes the grid for `steps` steps starting at `start`; returns the
/// final extraction and whether a stop was requested.
pub fn optimize_grid(
    run: &Run,
    grid: &mut TetGrid,
    targets: &GeometryTargets,
    opt: &mut Adam,
    start: usize,
    log: &mut LossLog,
) -> Result<StageStatus> {
    let cfg = &run.cfg.geometry;
    let mut params = grid_params(grid);
    for step in start..cfg.steps {
        let r = geometry_step(run, grid, targets, step)?;
        if !r.total.is_finite() || check_finite(&r.grad, step).is_err() {
            run.save_state(STAGE, &state_path(run), step, &params, opt)?;
            return Err(Error::Diverged { step });
        }
        opt.update(&mut params, &r.grad)?;
        set_grid_params(grid, &params)?;
        let mut row = r.components;
        row.insert("total".into(), r.total);
        row.insert("faces".into(), r.mesh.faces.len() as f64);
        log.record(step, &row)?;
        let done = step + 1;
        if step % 25 == 0 || done == cfg.steps {
            log::info!("geometry step {done}/{}: loss {:.5}, {} faces", cfg.steps, r.total, r.mesh.faces.len());
        }
        if run.should_save(done, cfg.checkpoint_every, cfg.steps) {
            run.save_state(STAGE, &state_path(run), done, &params, opt)?;
        }
        if run.opts.stop_after == Some(done) && done < cfg.steps {
            return Ok(StageStatus::Stopped { step: done });
        }
    }
    Ok(StageStatus::Complete)
}

pub fn run_fine_geometry(run: &Run) -> Result<StageStatus> {
    let started = Instant::now();
    let cfg = &run.cfg;
    let dir = run.dir(GEOMETRY_DIR);
    std::fs::create_dir_all(&dir)?;
    let targets = load_targets(run)?;
    let field = load_coarse_field(run)?;
    let mut grid = init_grid(cfg.geometry.tet_resolution, cfg.coarse.bound, &field, cfg.geometry.density_threshold)
        .inspect_err(|e| {
            if matches!(e, Error::EmptySurface) {
                log::error!(
                    "coarse density never crosses {} inside the grid; lower geometry.density_threshold or train the coarse stage longer",
                    cfg.geometry.density_threshold
                );
            }
        })?;
    let mut opt = Adam::new(4 * grid.num_vertices(), cfg.geometry.lr);
    let mut start = 0;
    if let Some(ck) = run.resume_state(STAGE, &state_path(run))? {
        set_grid_params(&mut grid, &ck.params)?;
        opt = ck.optimizer;
        start = ck.step;
    }
    let log_path = dir.join("loss.csv");
    let mut log = if start > 0 { LossLog::append(&log_path)? } else { LossLog::create(&log_path)? };
    let status = optimize_grid(run, &mut grid, &targets, &mut opt, start, &mut log)?;
    log.flush()?;
    let mut outputs = vec![state_path(run), log_path];
    if status == StageStatus::Complete {
        let mesh = marching_tets(&grid)?.mesh;
        write_obj(&mesh_path(run), &mesh)?;
        write_ply(&dir.join("mesh.ply"), &mesh)?;
        for (name, cam) in [("front", &targets.front_cam), ("back", &targets.back_cam)] {
            let r = render_normals(&mesh, cam);
            encode_normals(&r.normal).save_png(&dir.join(format!("{name}_normal.png")))?;
            r.alpha.save_png(&dir.join(format!("{name}_alpha.png")))?;
        }
        outputs.extend([mesh_path(run), dir.join("mesh.ply")]);
        log::info!("geometry: exported {} vertices, {} faces", mesh.verts.len(), mesh.faces.len());
    }
    let pre = run.dir(PREPROCESS_DIR);
    let back = run.dir(BACKVIEW_DIR);
    let inputs = [
        field_path(run),
        pre.join("normal.png"),
        pre.join("alpha.png"),
        back.join("back_normal.png"),
        back.join("back_alpha.png"),
    ];
    write_manifest(run, GEOMETRY_DIR, &inputs, &outputs, started, status)?;
    Ok(status)
}
