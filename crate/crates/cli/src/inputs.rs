use std::path::{Path, PathBuf};

use clap::ValueEnum;
use nystra::io::{read_tensor_with_report, TapManifest, TensorRole};
use nystra::{AttentionInputs, Dtype, Error, ExplicitLandmarks, LandmarkSet, LandmarkStrategy, Matrix};

use crate::Failure;

#[derive(clap::Args, Debug)]
pub struct LandmarkArgs {
    /// Number of landmarks; clamped to N.
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    /// Landmark selection; defaults to pool-2d when a square grid is known.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Token grid for pool-2d, e.g. 32x32.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// Token indices used as landmarks (explicit strategy).
    #[arg(long, value_delimiter = ',')]
    pub landmark_indices: Vec<usize>,
    /// Landmark queries, an m×d TensorFile (explicit strategy).
    #[arg(long, requires = "k_bar")]
    pub q_bar: Option<PathBuf>,
    /// Landmark keys, an m×d TensorFile (explicit strategy).
    #[arg(long, requires = "q_bar")]
    pub k_bar: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    #[value(name = "pool-1d")]
    Pool1d,
    #[value(name = "pool-2d")]
    Pool2d,
    Explicit,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

impl LandmarkArgs {
    pub fn strategy(&self, n: usize, known_grid: Option<(usize, usize)>) -> Result<LandmarkStrategy, Failure> {
        let grid = self.grid.or(known_grid);
        if let Some((h, w)) = grid {
            if h * w != n {
                return Err(Failure::Usage(format!("grid {h}x{w} does not cover N = {n} tokens")));
            }
        }
        let has_explicit = !self.landmark_indices.is_empty() || self.q_bar.is_some();
        let kind = match self.strategy {
            Some(k) => k,
            None if has_explicit => StrategyArg::Explicit,
            None => return Ok(LandmarkStrategy::default_for(n, grid)),
        };
        if has_explicit && kind != StrategyArg::Explicit {
            return Err(Failure::Usage(
                "--landmark-indices and --q-bar/--k-bar need --strategy explicit".into(),
            ));
        }
        match kind {
            StrategyArg::Pool1d => Ok(LandmarkStrategy::Pool1d),
            StrategyArg::Pool2d => {
                let (grid_h, grid_w) =
                    grid.ok_or_else(|| Failure::Usage("pool-2d needs --grid HxW".into()))?;
                Ok(LandmarkStrategy::Pool2d { grid_h, grid_w })
            }
            StrategyArg::Explicit => {
                if !self.landmark_indices.is_empty() {
                    let ix = ExplicitLandmarks::Indices(self.landmark_indices.clone());
                    return Ok(LandmarkStrategy::Explicit(ix));
                }
                match (&self.q_bar, &self.k_bar) {
                    (Some(q), Some(k)) => {
                        let set = LandmarkSet::new(read_matrix(q)?, read_matrix(k)?)?;
                        Ok(LandmarkStrategy::Explicit(ExplicitLandmarks::Matrices(set)))
                    }
                    _ => Err(Failure::Usage(
                        "explicit strategy needs --landmark-indices or --q-bar and --k-bar".into(),
                    )),
                }
            }
        }
    }
}

fn read_matrix(path: &Path) -> Result<Matrix, Failure> {
    let (t, _) = read_tensor_with_report(path)?;
    if t.is_batch() {
        return Err(Error::Shape(format!("{}: expected a 2-D tensor, got shape {:?}", path.display(), t.shape())).into());
    }
    Ok(t.matrix()?)
}

/// Query, key and value items read from TensorFiles or a manifest.
pub struct Loaded {
    pub items: Vec<AttentionInputs>,
    pub dtype: Dtype,
    pub batch: bool,
    pub grid: Option<(usize, usize)>,
}

impl Loaded {
    pub fn tokens(&self) -> usize {
        self.items[0].tokens()
    }
}

pub struct Paths {
    pub q: PathBuf,
    pub k: PathBuf,
    pub v: Option<PathBuf>,
    pub grid: Option<(usize, usize)>,
}

pub fn from_manifest(path: &Path, need_v: bool) -> Result<Paths, Failure> {
    let man = TapManifest::read(path)?;
    man.validate(path)?;
    let get = |role| {
        man.file(role)
            .map(|f| man.resolve(path, f))
            .ok_or_else(|| Failure::Usage(format!("manifest lists no {role:?} file")))
    };
    Ok(Paths {
        q: get(TensorRole::Q)?,
        k: get(TensorRole::K)?,
        v: if need_v { Some(get(TensorRole::V)?) } else { None },
        grid: Some(man.grid()),
    })
}

/// Loads the tensors, checking that batch sizes and token counts agree.
/// Without a value file the values are a single zero column.
pub fn load(paths: &Paths) -> Result<Loaded, Failure> {
    let (q, _) = read_tensor_with_report(&paths.q)?;
    let (k, _) = read_tensor_with_report(&paths.k)?;
    let v = paths.v.as_deref().map(read_tensor_with_report).transpose()?.map(|(t, _)| t);
    let b = q.batch_len();
    let n = q.matrix_shape().0;
    let mismatch = |what: &str, t: &nystra::io::Tensor| {
        Failure::Core(Error::Shape(format!(
            "{what} has shape {:?} but queries have shape {:?}",
            t.shape(),
            q.shape()
        )))
    };
    if k.batch_len() != b || k.matrix_shape().0 != n {
        return Err(mismatch("keys", &k));
    }
    if let Some(v) = &v {
        if v.batch_len() != b || v.matrix_shape().0 != n {
            return Err(mismatch("values", v));
        }
    }
    let qs = q.matrices::<f64>();
    let ks = k.matrices::<f64>();
    let vs = match &v {
        Some(v) => v.matrices::<f64>(),
        None => vec![Matrix::zeros(n, 1); b],
    };
    let items = qs
        .into_iter()
        .zip(ks)
        .zip(vs)
        .map(|((q, k), v)| AttentionInputs::new(q, k, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Loaded {
        items,
        dtype: q.dtype(),
        batch: q.is_batch(),
        grid: paths.grid,
    })
}
