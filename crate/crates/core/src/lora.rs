//! Low-rank adapters on named 2-D weights.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::Stream;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, Var};

pub const A_INIT_STD: f64 = 0.02;

/// Trainable update `ΔW = (α/r)·B·A` for the base weight `target` (`d_out × d_in`).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
    pub enabled: bool,
}

impl LoraAdapter {
    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// (α/r)·B·A.
    pub fn delta(&self) -> Result<Tensor> {
        let ba = self.b.matmul(&self.a)?;
        let s = self.scale();
        Tensor::new(ba.shape().to_vec(), ba.data().iter().map(|v| s * v).collect())
    }
}

/// Freeze every base parameter and create adapters for `targets`.
/// `alpha` defaults to the rank.
pub fn attach(base: &mut ParamStore, targets: &[&str], rank: usize, alpha: Option<f64>, seed: u64) -> Result<Vec<LoraAdapter>> {
    if rank == 0 {
        return config_err("LoRA rank must be at least 1");
    }
    let mut out = Vec::with_capacity(targets.len());
    for &target in targets {
        let Some(w) = base.by_name(target) else {
            return config_err(format!("unknown LoRA target {target}"));
        };
        let [d_out, d_in] = match w.shape() {
            [o, i] => [*o, *i],
            s => return config_err(format!("LoRA target {target} has shape {s:?}, expected a matrix")),
        };
        if rank > d_in.min(d_out) {
            return config_err(format!("rank {rank} exceeds min({d_out}, {d_in}) for {target}"));
        }
        let mut rng = Stream::child(seed, target);
        let mut a = Tensor::randn(&[rank, d_in], A_INIT_STD, &mut rng);
        let mut b = Tensor::zeros(&[d_out, rank]);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        out.push(LoraAdapter { target: target.to_string(), rank, alpha: alpha.unwrap_or(rank as f64), a, b, enabled: true });
    }
    base.freeze_all();
    Ok(out)
}

fn rows(x: &Tensor) -> Result<(usize, usize, bool)> {
    match x.shape() {
        [n] => Ok((1, *n, true)),
        [m, n] => Ok((*m, *n, false)),
        s => dim_err(format!("expected a vector or row batch, got {s:?}")),
    }
}

/// `W·x + (α/r)·B·(A·x)` for each row `x` of `x` (`[d_in]` or `[N, d_in]`).
pub fn adapted_forward(x: &Tensor, w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (n, d_in, vector) = rows(x)?;
    if w.shape() != [adapter.d_out(), adapter.d_in()] || d_in != adapter.d_in() {
        return dim_err(format!("input {:?}, weight {:?}, adapter {}×{}", x.shape(), w.shape(), adapter.d_out(), adapter.d_in()));
    }
    let xm = x.reshape(&[n, d_in])?;
    let base = xm.matmul(&w.transpose()?)?;
    if !adapter.enabled {
        return if vector { base.reshape(&[adapter.d_out()]) } else { Ok(base) };
    }
    let ax = xm.matmul(&adapter.a.transpose()?)?;
    let bax = ax.matmul(&adapter.b.transpose()?)?;
    let s = adapter.scale();
    let data = base.data().iter().zip(bax.data()).map(|(y, d)| y + s * d).collect();
    let shape = if vector { vec![adapter.d_out()] } else { vec![n, adapter.d_out()] };
    Tensor::new(shape, data)
}

/// W + (α/r)·B·A.
pub fn merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let d = adapter.delta()?;
    if d.shape() != w.shape() {
        return dim_err(format!("adapter delta {:?} vs weight {:?}", d.shape(), w.shape()));
    }
    Tensor::new(w.shape().to_vec(), w.data().iter().zip(d.data()).map(|(a, b)| a + b).collect())
}

/// W − (α/r)·B·A.
pub fn unmerge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let d = adapter.delta()?;
    if d.shape() != w.shape() {
        return dim_err(format!("adapter delta {:?} vs weight {:?}", d.shape(), w.shape()));
    }
    Tensor::new(w.shape().to_vec(), w.data().iter().zip(d.data()).map(|(a, b)| a - b).collect())
}

/// Σ r·(d_in + d_out) over adapters, plus `extras`.
pub fn trainable_param_count(adapters: &[LoraAdapter], extras: usize) -> usize {
    adapters.iter().map(LoraAdapter::param_count).sum::<usize>() + extras
}

#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Tape handles of the enabled adapters, keyed by target name.
#[derive(Clone, Debug, Default)]
pub struct LoraBinding {
    map: HashMap<String, LoraVars>,
}

impl LoraBinding {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, target: &str) -> Option<&LoraVars> {
        self.map.get(target)
    }
}

pub fn bind_adapters(adapters: &[LoraAdapter], tape: &mut Tape) -> LoraBinding {
    let map = adapters
        .iter()
        .filter(|a| a.enabled)
        .map(|a| (a.target.clone(), LoraVars { a: tape.leaf(&a.a), b: tape.leaf(&a.b), scale: a.scale() }))
        .collect();
    LoraBinding { map }
}

pub fn collect_adapter_grads(adapters: &mut [LoraAdapter], tape: &Tape, binding: &LoraBinding) -> Result<()> {
    for ad in adapters.iter_mut() {
        if let Some(v) = binding.get(&ad.target) {
            tape.write_grad(v.a, &mut ad.a)?;
            tape.write_grad(v.b, &mut ad.b)?;
        }
    }
    Ok(())
}

/// `W + (α/r)·B·A` recorded on the tape, or `W` itself without an adapter.
pub fn effective_weight(tape: &mut Tape, w: Var, lora: Option<&LoraVars>) -> Result<Var> {
    match lora {
        None => Ok(w),
        Some(l) => {
            let ba = tape.matmul(l.b, l.a)?;
            let d = tape.scale(ba, l.scale)?;
            tape.add(w, d)
        }
    }
}

/// Mutable references to every adapter matrix, in a stable order for the optimizer.
pub fn adapter_params(adapters: &mut [LoraAdapter]) -> Vec<&mut Tensor> {
    adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect()
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Write adapters as `lora.<target>.A` / `lora.<target>.B` plus a `<path>.meta` text sidecar.
pub fn save_adapters(path: impl AsRef<Path>, adapters: &[LoraAdapter]) -> Result<()> {
    let path = path.as_ref();
    let names: Vec<(String, String)> =
        adapters.iter().map(|a| (format!("lora.{}.A", a.target), format!("lora.{}.B", a.target))).collect();
    let mut entries = Vec::new();
    for (a, (na, nb)) in adapters.iter().zip(&names) {
        entries.push((na.as_str(), &a.a));
        entries.push((nb.as_str(), &a.b));
    }
    save_checkpoint(path, &entries)?;
    let mut meta = String::new();
    for a in adapters {
        writeln!(meta, "{} rank={} alpha={:e} enabled={}", a.target, a.rank, a.alpha, a.enabled).expect("string write");
    }
    std::fs::write(sidecar_path(path), meta)?;
    Ok(())
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<Vec<LoraAdapter>> {
    let path = path.as_ref();
    let tensors: HashMap<String, Tensor> = load_checkpoint(path)?.into_iter().collect();
    let meta = std::fs::read_to_string(sidecar_path(path))?;
    let bad = |line: &str| Error::Format(format!("bad adapter sidecar line: {line}"));
    let mut out = Vec::new();
    for line in meta.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let target = parts.next().ok_or_else(|| bad(line))?.to_string();
        let mut fields = HashMap::new();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(line))?;
            fields.insert(k, v);
        }
        let rank: usize = fields.get("rank").and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?;
        let alpha: f64 = fields.get("alpha").and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?;
        let enabled: bool = fields.get("enabled").and_then(|v| v.parse().ok()).unwrap_or(true);
        let get = |suffix: &str| {
            tensors
                .get(&format!("lora.{target}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing lora.{target}.{suffix}")))
        };
        let mut a = get("A")?;
        let mut b = get("B")?;
        if a.shape()[0] != rank || b.shape()[1] != rank {
            return Err(Error::Format(format!("adapter {target}: matrices disagree with rank {rank}")));
        }
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        out.push(LoraAdapter { target, rank, alpha, a, b, enabled });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::randn(&[64, 64], 0.1, &mut Stream::new(1))).unwrap();
        s.add("narrow", Tensor::randn(&[8, 64], 0.1, &mut Stream::new(2))).unwrap();
        s.add("bias", Tensor::zeros(&[64])).unwrap();
        s
    }

    #[test]
    fn attach_initializes_and_freezes() {
        let mut s = base();
        let ads = attach(&mut s, &["w"], 4, None, 9).unwrap();
        assert_eq!(ads[0].alpha, 4.0);
        assert_eq!(ads[0].scale(), 1.0);
        assert!(ads[0].b.data().iter().all(|v| *v == 0.0));
        assert!(s.ids().all(|id| !s.get(id).requires_grad()));
        assert_eq!(trainable_param_count(&ads, 0), 512);
    }

    #[test]
    fn attach_errors() {
        let mut s = base();
        assert!(matches!(attach(&mut s, &["nope"], 4, None, 0), Err(Error::Config(_))));
        assert!(matches!(attach(&mut s, &["narrow"], 9, None, 0), Err(Error::Config(_))));
        assert!(matches!(attach(&mut s, &["bias"], 1, None, 0), Err(Error::Config(_))));
        assert!(attach(&mut s, &["narrow"], 8, None, 0).is_ok());
    }

    #[test]
    fn disabled_or_zero_b_is_base() {
        let mut s = base();
        let mut ads = attach(&mut s, &["w"], 4, None, 9).unwrap();
        let w = s.by_name("w").unwrap().clone();
        let x = Tensor::randn(&[5, 64], 1.0, &mut Stream::new(3));
        let base_out = x.matmul(&w.transpose().unwrap()).unwrap();
        assert_eq!(adapted_forward(&x, &w, &ads[0]).unwrap(), base_out);
        ads[0].b = Tensor::randn(&[64, 4], 1.0, &mut Stream::new(4));
        ads[0].enabled = false;
        assert_eq!(adapted_forward(&x, &w, &ads[0]).unwrap(), base_out);
    }
}
