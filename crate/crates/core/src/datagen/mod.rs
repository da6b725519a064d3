//! Input–output trajectory pairs drawn from the attractor of each system.

mod sample;
mod task;

use std::path::Path;

use log::warn;
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sample::{
    advance, burn_in, draw_nu0, sample_nu0, sample_rng, simulate, spectral_filter, stream_id, SpectralFilter,
    KS_MAX_STEP,
};
pub use task::{l96_observed, Split, Task, TaskSpec, PRESETS};

use crate::dynsys::{aligned_steps, SystemKind};
use crate::error::{ensure, Error, Result};
use crate::formats::{read_file, write_file, DATASET_MAGIC};

/// Fresh streams tried for one sample before giving up.
pub const MAX_ATTEMPTS: u32 = 64;

/// Identifies the random stream a sample was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSeed {
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskSpec,
    pub split: Split,
    pub seed: u64,
    /// `[J × N_in × d_in]`
    pub inputs: Array3<f64>,
    /// `[J × N_out × d_out]`
    pub outputs: Array3<f64>,
    pub seeds: Vec<SampleSeed>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    task: TaskSpec,
    task_hash: String,
    split: Split,
    seed: u64,
    dtype: String,
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    seeds: Vec<SampleSeed>,
}

/// Full state trajectory on `[0, t_end]` (sampled every `task.dt`) for the
/// given random stream, after burn-in.
pub fn trajectory(task: &TaskSpec, seed: u64, stream: u64, t_end: f64) -> Result<Array2<f64>> {
    let mut rng = sample_rng(seed, stream);
    let x0 = draw_nu0(&task.system.system, &mut rng);
    let x0 = advance(&task.system.system, &x0, task.burn_in())?;
    let steps = aligned_steps(t_end, task.dt)?;
    simulate(&task.system.system, &x0, task.dt, steps)
}

/// Observed projection of consecutive full states, filtered for KS.
pub fn observe(task: &TaskSpec, states: ArrayView2<f64>) -> Result<Array2<f64>> {
    let p = states.select(Axis(1), &task.system.p_indices);
    match (task.filter_modes, &task.system.system) {
        (Some(k), SystemKind::KuramotoSivashinsky { grid, .. }) => {
            let f = SpectralFilter::new(*grid, k)?;
            let mut out = p;
            for mut row in out.rows_mut() {
                let v = f.apply(row.as_slice().expect("rows are contiguous"))?;
                row.iter_mut().zip(v).for_each(|(d, s)| *d = s);
            }
            Ok(out)
        }
        _ => Ok(p),
    }
}

/// Target projection for a smoothing task.
fn hidden(task: &TaskSpec, states: ArrayView2<f64>) -> Array2<f64> {
    if task.system.q_indices.is_empty() {
        states.select(Axis(1), &task.system.p_indices)
    } else {
        states.select(Axis(1), &task.system.q_indices)
    }
}

fn row_of(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

/// Input–output pair for one stream.
pub fn sample_pair(task: &TaskSpec, seed: u64, stream: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let t_end = task.input_window[1].max(task.output_window[1]);
    let states = trajectory(task, seed, stream, t_end)?;
    let dt = task.dt;
    let (a, b) = (row_of(task.input_window[0], dt), row_of(task.input_window[1], dt));
    let (c, d) = (row_of(task.output_window[0], dt), row_of(task.output_window[1], dt));
    let input = observe(task, states.slice(s![a..=b, ..]))?;
    let output = match task.task {
        Task::Smoothing => hidden(task, states.slice(s![c..=d, ..])),
        Task::Forecasting => observe(task, states.slice(s![c..=d, ..]))?,
    };
    Ok((input, output))
}

/// Draws `count` independent pairs. Samples whose trajectory blows up are
/// redrawn from the next stream; the result does not depend on the number
/// of worker threads.
pub fn generate(task: &TaskSpec, count: usize, seed: u64, split: Split) -> Result<Dataset> {
    task.validate()?;
    ensure!(count >= 1, Usage, "a dataset needs at least one sample");
    type Drawn = (Array2<f64>, Array2<f64>, u64, u32);
    let results: Vec<Result<Drawn>> = (0..count)
        .into_par_iter()
        .map(|j| {
            let mut last = None;
            for attempt in 0..MAX_ATTEMPTS {
                let stream = stream_id(split.tag(), j as u64, attempt);
                match sample_pair(task, seed, stream) {
                    Ok((i, o)) if i.iter().chain(o.iter()).all(|v| v.is_finite()) => return Ok((i, o, stream, attempt)),
                    Ok(_) => last = Some(Error::Numerical("non-finite sample".into())),
                    Err(e @ (Error::Integration { .. } | Error::Numerical(_))) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.unwrap())
        })
        .collect();

    let (n_in, d_in) = (task.input_grid().points, task.in_channels());
    let (n_out, d_out) = (task.output_grid().points, task.out_channels());
    let mut inputs = Array3::zeros((count, n_in, d_in));
    let mut outputs = Array3::zeros((count, n_out, d_out));
    let mut seeds = Vec::with_capacity(count);
    let mut retries = 0u64;
    for (j, r) in results.into_iter().enumerate() {
        let (i, o, stream, attempt) = r?;
        inputs.index_axis_mut(Axis(0), j).assign(&i);
        outputs.index_axis_mut(Axis(0), j).assign(&o);
        seeds.push(SampleSeed { stream });
        retries += attempt as u64;
    }
    if retries > 0 {
        warn!("{retries} sample(s) were redrawn after the integration blew up");
    }
    Ok(Dataset { task: task.clone(), split, seed, inputs, outputs, seeds })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, j: usize) -> ArrayView2<'_, f64> {
        self.inputs.index_axis(Axis(0), j)
    }

    pub fn output(&self, j: usize) -> ArrayView2<'_, f64> {
        self.outputs.index_axis(Axis(0), j)
    }

    /// The samples with the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            task: self.task.clone(),
            split: self.split,
            seed: self.seed,
            inputs: self.inputs.select(Axis(0), idx),
            outputs: self.outputs.select(Axis(0), idx),
            seeds: idx.iter().map(|&i| self.seeds[i]).collect(),
        }
    }

    /// Observed trajectory of sample `j` on `[0, t_end]`, regenerated from
    /// its stored seed.
    pub fn observed_trajectory(&self, j: usize, t_end: f64) -> Result<Array2<f64>> {
        let states = trajectory(&self.task, self.seed, self.seeds[j].stream, t_end)?;
        observe(&self.task, states.view())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let j = self.len();
        ensure!(j >= 1, Usage, "a dataset needs at least one sample");
        ensure!(self.outputs.len_of(Axis(0)) == j && self.seeds.len() == j, Format, "sample counts disagree");
        let want_in = (self.task.input_grid().points, self.task.in_channels());
        let want_out = (self.task.output_grid().points, self.task.out_channels());
        ensure!(
            (self.inputs.dim().1, self.inputs.dim().2) == want_in,
            Format,
            "inputs have shape {:?}, task implies {want_in:?}",
            self.inputs.dim()
        );
        ensure!(
            (self.outputs.dim().1, self.outputs.dim().2) == want_out,
            Format,
            "outputs have shape {:?}, task implies {want_out:?}",
            self.outputs.dim()
        );
        ensure!(
            self.inputs.iter().chain(self.outputs.iter()).all(|v| v.is_finite()),
            Numerical,
            "dataset contains non-finite values"
        );
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = Header {
            format: "OBSF1".into(),
            version: 1,
            task: self.task.clone(),
            task_hash: self.task.hash()?,
            split: self.split,
            seed: self.seed,
            dtype: "f64".into(),
            input_shape: self.inputs.dim().into(),
            output_shape: self.outputs.dim().into(),
            seeds: self.seeds.clone(),
        };
        let a = self.inputs.as_standard_layout();
        let b = self.outputs.as_standard_layout();
        write_file(path, DATASET_MAGIC, &header, &[a.as_slice().unwrap(), b.as_slice().unwrap()])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, values): (Header, Vec<f64>) = read_file(path, DATASET_MAGIC)?;
        ensure!(h.format == "OBSF1" && h.version == 1, Format, "unsupported dataset format {} v{}", h.format, h.version);
        ensure!(h.dtype == "f64", Format, "unsupported dtype {}", h.dtype);
        ensure!(h.task.hash()? == h.task_hash, Format, "task hash does not match the stored task");
        let ni: usize = h.input_shape.iter().product();
        let no: usize = h.output_shape.iter().product();
        ensure!(values.len() == ni + no, Format, "payload has {} values, header implies {}", values.len(), ni + no);
        let mut values = values;
        let out = values.split_off(ni);
        let to3 = |s: [usize; 3], v: Vec<f64>| {
            Array3::from_shape_vec((s[0], s[1], s[2]), v).map_err(|e| Error::Format(e.to_string()))
        };
        let ds = Dataset {
            task: h.task,
            split: h.split,
            seed: h.seed,
            inputs: to3(h.input_shape, values)?,
            outputs: to3(h.output_shape, out)?,
            seeds: h.seeds,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_shares_grid_with_state() {
        let task = TaskSpec::preset("l63-smoothing").unwrap();
        let ds = generate(&task, 3, 7, Split::Train).unwrap();
        assert_eq!(ds.inputs.dim(), (3, 251, 1));
        assert_eq!(ds.outputs.dim(), (3, 251, 2));
        let full = trajectory(&task, 7, ds.seeds[1].stream, 5.0).unwrap();
        for i in 0..251 {
            assert_eq!(ds.inputs[[1, i, 0]], full[[i, 0]]);
            assert_eq!(ds.outputs[[1, i, 1]], full[[i, 2]]);
        }
    }

    #[test]
    fn forecast_windows_meet() {
        let task = TaskSpec::preset("l63-forecasting").unwrap();
        let ds = generate(&task, 2, 1, Split::Test).unwrap();
        for j in 0..2 {
            assert_eq!(ds.inputs[[j, 200, 0]], ds.outputs[[j, 0, 0]]);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let task = TaskSpec::preset("l63-smoothing").unwrap();
        let a = generate(&task, 2, 1, Split::Train).unwrap();
        let b = generate(&task, 2, 1, Split::Test).unwrap();
        assert_ne!(a.inputs, b.inputs);
        assert!(a.seeds.iter().all(|s| !b.seeds.contains(s)));
    }

    #[test]
    fn empty_dataset_rejected() {
        let task = TaskSpec::preset("l63-smoothing").unwrap();
        assert!(generate(&task, 0, 1, Split::Train).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let task = TaskSpec::preset("l96-forecasting").unwrap();
        let ds = generate(&task, 2, 3, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.obsf");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}
