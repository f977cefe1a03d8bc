use rand_chacha::ChaCha8Rng;

use crate::nn::{check_rank, is_adapter_weight, normal_matrix, AdapterSpec};
use crate::tensor::{ParamStore, Result, Tensor, TensorError};

/// Base matrices in `base` targeted by `spec`.
pub fn adapter_names(base: &ParamStore, spec: &AdapterSpec) -> Vec<String> {
    base.iter()
        .filter(|(n, t)| !is_adapter_weight(n) && t.shape().len() == 2 && spec.targets_param(n))
        .map(|(n, _)| n.clone())
        .collect()
}

/// Fresh adapter weights for every targeted matrix: `A` Gaussian, `B` zero,
/// so the adapted model starts out identical to the base.
pub fn init_adapters(base: &ParamStore, spec: &AdapterSpec, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let names = adapter_names(base, spec);
    if names.is_empty() {
        return Err(TensorError::Invalid(format!("no parameter matches adapter targets {:?}", spec.targets)));
    }
    let mut out = ParamStore::new();
    for name in names {
        let w = base.get(&name)?;
        check_rank(spec, w)?;
        let (rows, cols) = (w.rows(), w.cols());
        out.insert(format!("{name}.lora_a"), normal_matrix(rng, spec.rank, cols, (1.0 / cols as f64).sqrt()));
        out.insert(format!("{name}.lora_b"), Tensor::zeros(&[rows, spec.rank]));
    }
    Ok(out)
}

/// Materializes `W + (s/r)·B·A` for every adapter present in `params` and
/// drops the adapter weights. Merging the same adapter twice adds it twice.
pub fn merge_adapters(params: &ParamStore, spec: &AdapterSpec) -> Result<ParamStore> {
    let mut out = strip_adapters(params);
    for name in adapter_names(params, spec) {
        let (a_name, b_name) = (format!("{name}.lora_a"), format!("{name}.lora_b"));
        if !params.contains(&a_name) {
            continue;
        }
        let w = params.get(&name)?;
        check_rank(spec, w)?;
        let delta = params.get(&b_name)?.matmul(params.get(&a_name)?, false, false)?;
        if delta.shape() != w.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "merge_adapters",
                node: 0,
                lhs: w.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        let f = spec.factor();
        let merged = w.data().iter().zip(delta.data()).map(|(a, b)| a + f * b).collect();
        out.insert(name, Tensor::new(w.shape().to_vec(), merged)?);
    }
    Ok(out)
}

/// Copy of `params` without any adapter weights.
pub fn strip_adapters(params: &ParamStore) -> ParamStore {
    params.iter().filter(|(n, _)| !is_adapter_weight(n)).map(|(n, t)| (n.clone(), t.clone())).collect()
}
