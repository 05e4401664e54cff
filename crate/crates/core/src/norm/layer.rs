use super::alt::{alt_norm_backward, alt_norm_forward, AltCache};
use super::batch::{
    backward_from_cache, bn_train_forward, eval_forward, ubn_forward, ForwardCache, Mode, UbnParams,
};
use super::config::{NormConfig, NormKind};
use super::stats::RunningStats;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
enum LayerCache {
    Batch(ForwardCache),
    Alt(AltCache),
}

/// A normalization layer of any kind with its parameters, gradients, running
/// state and the cache of its last training forward.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub cfg: NormConfig,
    pub params: UbnParams,
    pub grads: UbnParams,
    state: Option<RunningStats>,
    cache: Option<LayerCache>,
}

impl NormLayer {
    pub fn new(channels: usize, cfg: NormConfig) -> Result<Self> {
        cfg.validate(Some(channels))?;
        let state = cfg
            .kind
            .is_batch_kind()
            .then(|| RunningStats::for_config(channels, &cfg));
        Ok(Self {
            params: UbnParams::new(channels),
            grads: UbnParams::zeros(channels),
            state,
            cache: None,
            cfg,
        })
    }

    pub fn channels(&self) -> usize {
        self.params.channels()
    }

    /// Running statistics; `None` for IN/LN/GN.
    pub fn state(&self) -> Option<&RunningStats> {
        self.state.as_ref()
    }

    pub fn state_mut(&mut self) -> Option<&mut RunningStats> {
        self.state.as_mut()
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        if mode == Mode::Train {
            self.cache = None;
        }
        match self.cfg.kind {
            NormKind::Bn | NormKind::Ubn => {
                let state = self.state.as_mut().expect("batch kinds own running stats");
                let out = match (self.cfg.kind, mode) {
                    (NormKind::Bn, Mode::Train) => {
                        bn_train_forward(x, state, &self.params, &self.cfg)?
                    }
                    (NormKind::Bn, Mode::Eval { allow_cold_start }) => {
                        eval_forward(x, state, &self.params, &self.cfg, allow_cold_start)?
                    }
                    _ => ubn_forward(x, state, &self.params, &self.cfg, mode)?,
                };
                if mode == Mode::Train {
                    self.cache = Some(LayerCache::Batch(out.cache));
                }
                Ok(out.output)
            }
            NormKind::In | NormKind::Ln | NormKind::Gn { .. } => {
                let out = alt_norm_forward(x, &self.params, &self.cfg)?;
                if mode == Mode::Train {
                    self.cache = Some(LayerCache::Alt(out.cache));
                }
                Ok(out.output)
            }
        }
    }

    /// Inference with the stored statistics. Takes `&self`, so it cannot
    /// touch running state.
    pub fn infer(&self, x: &Tensor4, allow_cold_start: bool) -> Result<Tensor4> {
        match (&self.state, self.cfg.kind) {
            (Some(state), NormKind::Bn | NormKind::Ubn) => {
                eval_forward(x, state, &self.params, &self.cfg, allow_cold_start).map(|o| o.output)
            }
            _ => alt_norm_forward(x, &self.params, &self.cfg).map(|o| o.output),
        }
    }

    /// Backward through the last training forward. Stores the parameter
    /// gradients in `self.grads` and returns the input gradient. The cache is
    /// consumed, so a second call without a new forward is a contract error.
    pub fn backward(&mut self, upstream: &Tensor4) -> Result<Tensor4> {
        let grads = match self.cache.take() {
            Some(LayerCache::Batch(cache)) => {
                backward_from_cache(&cache, upstream, &self.params, self.cfg.eps)?
            }
            Some(LayerCache::Alt(cache)) => {
                let input = cache.input().clone();
                alt_norm_backward(&input, upstream, &self.params, &cache)?
            }
            None => {
                return Err(Error::Contract(
                    "backward called without a preceding training forward".into(),
                ))
            }
        };
        self.grads = grads.params;
        Ok(grads.d_input)
    }

    /// Writes parameters and running state under `prefix`.
    pub fn save(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (i, name) in UbnParams::GROUPS.iter().enumerate() {
            ckpt.insert(format!("{prefix}.{name}"), self.params.group(i).to_vec());
        }
        if let Some(s) = &self.state {
            ckpt.insert(format!("{prefix}.running_mean"), s.mu.to_vec());
            ckpt.insert(format!("{prefix}.running_var"), s.var.to_vec());
            ckpt.insert(format!("{prefix}.score"), vec![s.s]);
            ckpt.insert(format!("{prefix}.step_count"), vec![s.step_count as f64]);
            ckpt.insert(
                format!("{prefix}.gate_open_steps"),
                vec![s.gate_open_steps as f64],
            );
        }
    }

    pub fn load(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (i, name) in UbnParams::GROUPS.iter().enumerate() {
            let values = ckpt.get_len(&format!("{prefix}.{name}"), self.params.group(i).len())?;
            self.params.group_mut(i).copy_from_slice(values);
        }
        let c = self.channels();
        if let Some(s) = &mut self.state {
            s.mu.copy_from_slice(ckpt.get_len(&format!("{prefix}.running_mean"), c)?);
            s.var
                .copy_from_slice(ckpt.get_len(&format!("{prefix}.running_var"), c)?);
            s.s = ckpt.get_len(&format!("{prefix}.score"), 1)?[0];
            s.step_count = ckpt.get_len(&format!("{prefix}.step_count"), 1)?[0] as u64;
            s.gate_open_steps = ckpt.get_len(&format!("{prefix}.gate_open_steps"), 1)?[0] as u64;
        }
        self.cache = None;
        Ok(())
    }
}
