//! Sequence-to-sequence temporal convolutional autoencoder.
//!
//! The encoder maps `X [N,C,T,V]` to per-frame latents `Z [N,T,V*D]`; the
//! decoder mirrors it back to `X_hat [N,C,T,V]`. In the default
//! joint-disentangled mode every joint's `C x T` series runs through the
//! same weights as an independent batch item, so joints occupy separate
//! `D`-sized blocks of the latent and the parameter count does not depend
//! on `V`. The entangled variants concatenate joints into the channel axis
//! instead.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{real, ParamStore, Real, Tape, Tensor, TensorId};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub stages: usize,
    pub layers_per_stage: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub disentangled_encoder: bool,
    pub disentangled_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 2,
            layers_per_stage: 3,
            hidden_dim: 64,
            latent_dim: 16,
            kernel: 3,
            disentangled_encoder: true,
            disentangled_decoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 || self.layers_per_stage < 1 {
            return Err(Error::InvalidArg(
                "model needs at least one stage and one layer per stage".into(),
            ));
        }
        if self.hidden_dim < 1 || self.latent_dim < 1 {
            return Err(Error::InvalidArg("hidden and latent dims must be >= 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArg("kernel size must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    dilated: ConvIdx,
    pointwise: ConvIdx,
}

#[derive(Clone, Debug)]
struct StageIdx {
    in_proj: ConvIdx,
    layers: Vec<LayerIdx>,
    out_proj: ConvIdx,
}

#[derive(Clone, Debug)]
struct TcnIdx {
    stages: Vec<StageIdx>,
}

/// Encoder + decoder parameters over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Autoencoder<F> {
    pub cfg: ModelConfig,
    pub in_channels: usize,
    pub joints: usize,
    params: ParamStore<F>,
    enc: TcnIdx,
    dec: TcnIdx,
}

fn kaiming_conv<F: Real>(
    rng: &mut (impl Rng + ?Sized),
    cout: usize,
    cin: usize,
    k: usize,
) -> Tensor<F> {
    let bound = (6.0 / (cin * k) as f64).sqrt();
    let data: Vec<F> = (0..cout * cin * k)
        .map(|_| real::<F>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(vec![cout, cin, k], data).unwrap()
}

impl<F: Real> Autoencoder<F> {
    pub fn new(
        cfg: ModelConfig,
        in_channels: usize,
        joints: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if in_channels < 1 || joints < 1 {
            return Err(Error::InvalidArg("C and V must be >= 1".into()));
        }
        let mut params = ParamStore::new();
        let vd = joints * cfg.latent_dim;

        let enc_in = |s: usize| {
            if cfg.disentangled_encoder {
                if s == 0 {
                    in_channels
                } else {
                    cfg.latent_dim
                }
            } else if s == 0 {
                in_channels * joints
            } else {
                vd
            }
        };
        let enc_out = if cfg.disentangled_encoder { cfg.latent_dim } else { vd };
        let dec_in = if cfg.disentangled_decoder { cfg.latent_dim } else { vd };
        let dec_out = |s: usize| {
            let last = s + 1 == cfg.stages;
            match (cfg.disentangled_decoder, last) {
                (true, true) => in_channels,
                (true, false) => cfg.latent_dim,
                (false, true) => in_channels * joints,
                (false, false) => vd,
            }
        };

        let build = |prefix: &str,
                         in_of: &dyn Fn(usize) -> usize,
                         out_of: &dyn Fn(usize) -> usize,
                         params: &mut ParamStore<F>,
                         rng: &mut dyn rand::RngCore|
         -> TcnIdx {
            let mut stages = Vec::with_capacity(cfg.stages);
            for s in 0..cfg.stages {
                let cin = in_of(s);
                let h = cfg.hidden_dim;
                let in_proj = ConvIdx {
                    w: params.push(
                        format!("{prefix}.s{s}.in.w"),
                        kaiming_conv(rng, h, cin, 1),
                    ),
                    b: params.push(format!("{prefix}.s{s}.in.b"), Tensor::zeros(vec![h])),
                };
                let mut layers = Vec::with_capacity(cfg.layers_per_stage);
                for l in 0..cfg.layers_per_stage {
                    let dilated = ConvIdx {
                        w: params.push(
                            format!("{prefix}.s{s}.l{l}.dil.w"),
                            kaiming_conv(rng, h, h, cfg.kernel),
                        ),
                        b: params.push(
                            format!("{prefix}.s{s}.l{l}.dil.b"),
                            Tensor::zeros(vec![h]),
                        ),
                    };
                    let pointwise = ConvIdx {
                        w: params.push(
                            format!("{prefix}.s{s}.l{l}.pw.w"),
                            kaiming_conv(rng, h, h, 1),
                        ),
                        b: params.push(
                            format!("{prefix}.s{s}.l{l}.pw.b"),
                            Tensor::zeros(vec![h]),
                        ),
                    };
                    layers.push(LayerIdx { dilated, pointwise });
                }
                let cout = out_of(s);
                let out_proj = ConvIdx {
                    w: params.push(
                        format!("{prefix}.s{s}.out.w"),
                        kaiming_conv(rng, cout, h, 1),
                    ),
                    b: params.push(format!("{prefix}.s{s}.out.b"), Tensor::zeros(vec![cout])),
                };
                stages.push(StageIdx {
                    in_proj,
                    layers,
                    out_proj,
                });
            }
            TcnIdx { stages }
        };

        let enc = build("enc", &enc_in, &|_| enc_out, &mut params, rng);
        let dec = build("dec", &|_| dec_in, &dec_out, &mut params, rng);
        Ok(Autoencoder {
            cfg,
            in_channels,
            joints,
            params,
            enc,
            dec,
        })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Leaf all parameters onto a tape (in registration order) and return
    /// their ids. `trainable` controls whether gradients are recorded.
    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<TensorId> {
        (0..self.params.len())
            .map(|i| tape.leaf(self.params.get(i).clone(), trainable))
            .collect()
    }

    fn tcn(
        &self,
        tape: &mut Tape<F>,
        ids: &[TensorId],
        idx: &TcnIdx,
        x: TensorId,
    ) -> Result<TensorId> {
        let mut h = x;
        for stage in &idx.stages {
            h = tape.conv1d(h, ids[stage.in_proj.w], ids[stage.in_proj.b], 1)?;
            for (l, layer) in stage.layers.iter().enumerate() {
                let y = tape.conv1d(h, ids[layer.dilated.w], ids[layer.dilated.b], 1 << l)?;
                let y = tape.relu(y);
                let y = tape.conv1d(y, ids[layer.pointwise.w], ids[layer.pointwise.b], 1)?;
                h = tape.add(h, y)?;
            }
            h = tape.conv1d(h, ids[stage.out_proj.w], ids[stage.out_proj.b], 1)?;
        }
        Ok(h)
    }

    /// `X [N,C,T,V]` -> `Z [N,T,V*D]`.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        ids: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels || shape[3] != self.joints {
            return Err(Error::Shape(format!(
                "encode expects [N,{},T,{}], got {shape:?}",
                self.in_channels, self.joints
            )));
        }
        let (n, t, v, d) = (shape[0], shape[2], self.joints, self.cfg.latent_dim);
        if self.cfg.disentangled_encoder {
            let xp = tape.permute(x, &[0, 3, 1, 2])?; // [N,V,C,T]
            let xr = tape.reshape(xp, vec![n * v, self.in_channels, t])?;
            let z = self.tcn(tape, ids, &self.enc, xr)?; // [N*V,D,T]
            let zr = tape.reshape(z, vec![n, v, d, t])?;
            let zp = tape.permute(zr, &[0, 3, 1, 2])?; // [N,T,V,D]
            tape.reshape(zp, vec![n, t, v * d])
        } else {
            let xp = tape.permute(x, &[0, 1, 3, 2])?; // [N,C,V,T]
            let xr = tape.reshape(xp, vec![n, self.in_channels * v, t])?;
            let z = self.tcn(tape, ids, &self.enc, xr)?; // [N,V*D,T]
            tape.permute(z, &[0, 2, 1]) // [N,T,V*D]
        }
    }

    /// `Q [N,T,V*D]` -> `X_hat [N,C,T,V]`.
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        ids: &[TensorId],
        q: TensorId,
    ) -> Result<TensorId> {
        let shape = tape.value(q).shape().to_vec();
        let (v, d, c) = (self.joints, self.cfg.latent_dim, self.in_channels);
        if shape.len() != 3 || shape[2] != v * d {
            return Err(Error::Shape(format!(
                "decode expects [N,T,{}], got {shape:?}",
                v * d
            )));
        }
        let (n, t) = (shape[0], shape[1]);
        if self.cfg.disentangled_decoder {
            let qr = tape.reshape(q, vec![n, t, v, d])?;
            let qp = tape.permute(qr, &[0, 2, 3, 1])?; // [N,V,D,T]
            let qq = tape.reshape(qp, vec![n * v, d, t])?;
            let y = self.tcn(tape, ids, &self.dec, qq)?; // [N*V,C,T]
            let yr = tape.reshape(y, vec![n, v, c, t])?;
            tape.permute(yr, &[0, 2, 3, 1]) // [N,C,T,V]
        } else {
            let qp = tape.permute(q, &[0, 2, 1])?; // [N,V*D,T]
            let y = self.tcn(tape, ids, &self.dec, qp)?; // [N,C*V,T]
            let yr = tape.reshape(y, vec![n, c, v, t])?;
            tape.permute(yr, &[0, 1, 3, 2]) // [N,C,T,V]
        }
    }
}
