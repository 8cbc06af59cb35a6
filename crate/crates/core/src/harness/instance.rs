use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{effective_weight, AttentionInstance, GeneralInstance, LoraAdapter};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Contents of `meta.txt`: `L d seed gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceMeta {
    pub seq_len: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub gamma: f64,
}

/// A seeded special-case problem: constants, adapter and frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstance {
    pub inst: AttentionInstance,
    pub adapter: LoraAdapter,
    pub wstar: DenseMatrix,
    pub meta: InstanceMeta,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn check_dims(l: usize, d: usize, r: usize) -> Result<()> {
    if l == 0 || d == 0 || r == 0 || r > d {
        return Err(Error::Config(format!(
            "need L, d >= 1 and 1 <= r <= d, got L={l} d={d} r={r}"
        )));
    }
    Ok(())
}

/// Draws a special-case instance from ChaCha8 seeded with `seed`, with
/// standard-normal entries and `α = 2r`, then rescales `C1` and `C2` so that
/// `‖C1·W‖_∞ = ‖C2‖_∞ = gamma` for the adapted weight `W`.
pub fn gen_instance(
    seed: u64,
    l: usize,
    d: usize,
    r: usize,
    gamma: f64,
) -> Result<GeneratedInstance> {
    check_dims(l, d, r)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = normal(&mut rng, l, d, 1.0);
    let c2 = normal(&mut rng, l, d, 1.0);
    let c3 = normal(&mut rng, l, d, 1.0);
    let y = normal(&mut rng, l, d, 1.0);
    let unit = 1.0 / (d as f64).sqrt();
    let wstar = normal(&mut rng, d, d, unit);
    let b = normal(&mut rng, d, r, unit);
    let a = normal(&mut rng, r, d, unit);
    let adapter = LoraAdapter::new(b, a, 2.0 * r as f64)?;

    let w = effective_weight(&wstar, &adapter)?;
    let n1 = c1.matmul(&w)?.max_abs();
    let n2 = c2.max_abs();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Config("degenerate draw: zero score factor".into()));
    }
    let inst = AttentionInstance::new(c1.scale(gamma / n1), c2.scale(gamma / n2), c3, y)?;
    Ok(GeneratedInstance {
        inst,
        adapter,
        wstar,
        meta: InstanceMeta {
            seq_len: l,
            head_dim: d,
            seed,
            gamma,
        },
    })
}

/// Draws a joint problem and its two adapters (`α = 2r` each). Entries are
/// scaled so that attention scores stay moderate.
pub fn gen_general_instance(
    seed: u64,
    l: usize,
    d: usize,
    r: usize,
) -> Result<(GeneralInstance, LoraAdapter, LoraAdapter)> {
    check_dims(l, d, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = 1.0 / (d as f64).sqrt();
    let g = GeneralInstance {
        xq: normal(&mut rng, l, d, 0.5),
        xk: normal(&mut rng, l, d, 0.5),
        xv: normal(&mut rng, l, d, 1.0),
        y: normal(&mut rng, l, d, 1.0),
        wq_star: normal(&mut rng, d, d, unit),
        wk_star: normal(&mut rng, d, d, unit),
        wv_star: normal(&mut rng, d, d, unit),
    };
    let adp_q = LoraAdapter::new(
        normal(&mut rng, d, r, 0.5 * unit),
        normal(&mut rng, r, d, 0.5 * unit),
        2.0 * r as f64,
    )?;
    let adp_k = LoraAdapter::new(
        normal(&mut rng, d, r, 0.5 * unit),
        normal(&mut rng, r, d, 0.5 * unit),
        2.0 * r as f64,
    )?;
    Ok((g, adp_q, adp_k))
}

/// Writes `C1.mat C2.mat C3.mat Y.mat B.mat A.mat Wstar.mat`, `meta.txt`
/// (`L d seed gamma`) and `adapter.txt` (`r alpha`) into `dir`.
pub fn write_instance(dir: &Path, gi: &GeneratedInstance) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mats = [
        ("C1.mat", gi.inst.c1()),
        ("C2.mat", gi.inst.c2()),
        ("C3.mat", gi.inst.c3()),
        ("Y.mat", gi.inst.y()),
        ("B.mat", gi.adapter.b()),
        ("A.mat", gi.adapter.a()),
        ("Wstar.mat", &gi.wstar),
    ];
    for (name, m) in mats {
        m.write_to(dir.join(name))?;
    }
    let meta = &gi.meta;
    fs::write(
        dir.join("meta.txt"),
        format!(
            "{} {} {} {}\n",
            meta.seq_len, meta.head_dim, meta.seed, meta.gamma
        ),
    )?;
    fs::write(
        dir.join("adapter.txt"),
        format!("{} {}\n", gi.adapter.rank(), gi.adapter.alpha()),
    )?;
    Ok(())
}

fn read_fields(path: &Path, n: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let fields: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
    if fields.len() != n {
        return Err(Error::Parse {
            path: path.to_owned(),
            msg: format!("expected {n} fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_field<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        path: path.to_owned(),
        msg: format!("cannot parse {s:?}"),
    })
}

/// Reads a bundle written by [`write_instance`].
pub fn read_instance(dir: &Path) -> Result<GeneratedInstance> {
    let m = |name: &str| DenseMatrix::read_from(dir.join(name));
    let inst = AttentionInstance::new(m("C1.mat")?, m("C2.mat")?, m("C3.mat")?, m("Y.mat")?)?;
    let meta_path = dir.join("meta.txt");
    let f = read_fields(&meta_path, 4)?;
    let meta = InstanceMeta {
        seq_len: parse_field(&meta_path, &f[0])?,
        head_dim: parse_field(&meta_path, &f[1])?,
        seed: parse_field(&meta_path, &f[2])?,
        gamma: parse_field(&meta_path, &f[3])?,
    };
    if (meta.seq_len, meta.head_dim) != (inst.seq_len(), inst.head_dim()) {
        return Err(Error::Parse {
            path: meta_path,
            msg: format!(
                "meta says {}x{}, matrices are {}x{}",
                meta.seq_len,
                meta.head_dim,
                inst.seq_len(),
                inst.head_dim()
            ),
        });
    }
    let adp_path = dir.join("adapter.txt");
    let f = read_fields(&adp_path, 2)?;
    let r: usize = parse_field(&adp_path, &f[0])?;
    let alpha: f64 = parse_field(&adp_path, &f[1])?;
    let adapter = LoraAdapter::new(m("B.mat")?, m("A.mat")?, alpha)?;
    if adapter.rank() != r {
        return Err(Error::Parse {
            path: adp_path,
            msg: format!(
                "adapter.txt says r = {r}, B.mat has {} columns",
                adapter.rank()
            ),
        });
    }
    adapter.check_dim(inst.head_dim())?;
    Ok(GeneratedInstance {
        inst,
        adapter,
        wstar: m("Wstar.mat")?,
        meta,
    })
}
