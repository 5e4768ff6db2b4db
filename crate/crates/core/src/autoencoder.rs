//! Multi-output autoencoders for nonlinear factor completion.
//!
//! One shared encoder maps a panel column `Ỹ_·t` (length `N`) to a
//! `K1`-dimensional code; unit `i` is reconstructed by its own decoder
//! `φ_i`. The single-output variant shares one decoder across all units, so
//! its reconstruction of a column is the same for every unit.
//!
//! Training minimizes the squared error over untreated cells only. The encoder
//! still sees the full column, treated entries included, unless the masked
//! encoder mode is switched on, in which case treated entries are zeroed
//! after standardization.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, DenseNet, ForwardTrace, TrainConfig};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    /// Code dimension `K1`.
    pub bottleneck: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Zero treated entries of the encoder input.
    pub masked_encoder: bool,
    pub clamp_bound: f64,
    pub weight_bound: f64,
    pub train: TrainConfig,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            bottleneck: 4,
            encoder_hidden: vec![64],
            decoder_hidden: vec![16],
            masked_encoder: false,
            clamp_bound: f64::INFINITY,
            weight_bound: f64::INFINITY,
            train: TrainConfig {
                learning_rate: 2e-3,
                epochs: 400,
                batch_size: Some(16),
                weight_decay: 0.2,
                ..TrainConfig::default()
            },
        }
    }
}

impl AeConfig {
    pub fn with_bottleneck(&self, k1: usize) -> Self {
        Self {
            bottleneck: k1,
            ..self.clone()
        }
    }

    fn encoder_dims(&self, n_units: usize) -> Vec<usize> {
        let mut dims = vec![n_units];
        dims.extend(&self.encoder_hidden);
        dims.push(self.bottleneck);
        dims
    }

    fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.bottleneck];
        dims.extend(&self.decoder_hidden);
        dims.push(1);
        dims
    }
}

/// Global affine standardization computed from untreated cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub center: f64,
    pub scale: f64,
}

impl Standardizer {
    pub const IDENTITY: Self = Self {
        center: 0.0,
        scale: 1.0,
    };

    pub fn from_controls(y: &DMatrix<f64>, treated: &DMatrix<bool>) -> Result<Self> {
        let values: Vec<f64> = y
            .iter()
            .zip(treated.iter())
            .filter(|(_, &w)| !w)
            .map(|(&v, _)| v)
            .collect();
        if values.is_empty() {
            return Err(Error::EmptyControlSet);
        }
        let n = values.len() as f64;
        let center = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { center, scale })
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    #[inline]
    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.center
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecoderLayout {
    PerUnit,
    Shared,
}

/// Encoder plus decoders; `decoders.len()` is `N` (per unit) or 1 (shared).
#[derive(Debug, Clone, PartialEq)]
struct AeNets {
    encoder: DenseNet,
    decoders: Vec<DenseNet>,
    n_units: usize,
}

impl AeNets {
    fn init(n_units: usize, layout: DecoderLayout, config: &AeConfig, seed: u64) -> Result<Self> {
        if config.bottleneck == 0 {
            return Err(Error::InvalidConfig("bottleneck must be at least 1".into()));
        }
        let bounded = |net: DenseNet| {
            net.with_clamp_bound(config.clamp_bound)
                .with_weight_bound(config.weight_bound)
        };
        let encoder = bounded(DenseNet::init(
            &config.encoder_dims(n_units),
            derive_seed(seed, "ae-encoder", 0),
        )?);
        let n_decoders = match layout {
            DecoderLayout::PerUnit => n_units,
            DecoderLayout::Shared => 1,
        };
        let decoders = (0..n_decoders)
            .map(|i| {
                DenseNet::init(&config.decoder_dims(), derive_seed(seed, "ae-decoder", i as u64))
                    .map(bounded)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            decoders,
            n_units,
        })
    }

    fn layout(&self) -> DecoderLayout {
        if self.decoders.len() == 1 && self.n_units != 1 {
            DecoderLayout::Shared
        } else {
            DecoderLayout::PerUnit
        }
    }

    fn decoder(&self, unit: usize) -> &DenseNet {
        match self.layout() {
            DecoderLayout::PerUnit => &self.decoders[unit],
            DecoderLayout::Shared => &self.decoders[0],
        }
    }
}

/// Per-column training data in standardized units.
struct ColumnData {
    input: Vec<f64>,
    /// `(unit, standardized target)` for every untreated cell in the column.
    targets: Vec<(usize, f64)>,
}

fn column_data(
    y: &DMatrix<f64>,
    treated: &DMatrix<bool>,
    std: Standardizer,
    masked_encoder: bool,
) -> Vec<ColumnData> {
    (0..y.ncols())
        .map(|t| {
            let input = (0..y.nrows())
                .map(|i| {
                    if masked_encoder && treated[(i, t)] {
                        0.0
                    } else {
                        std.apply(y[(i, t)])
                    }
                })
                .collect();
            let targets = (0..y.nrows())
                .filter(|&i| !treated[(i, t)])
                .map(|i| (i, std.apply(y[(i, t)])))
                .collect();
            ColumnData { input, targets }
        })
        .collect()
}

struct Workspace {
    enc_trace: ForwardTrace,
    dec_trace: ForwardTrace,
    code_grad: Vec<f64>,
    tmp_grad: Vec<f64>,
}

impl Workspace {
    fn new(nets: &AeNets) -> Self {
        let k = nets.encoder.output_dim();
        Self {
            enc_trace: nets.encoder.new_trace(),
            dec_trace: nets.decoders[0].new_trace(),
            code_grad: vec![0.0; k],
            tmp_grad: vec![0.0; k],
        }
    }
}

/// Sum of squared errors over the column's targets, with gradients accumulated
/// when `grads` is given (each residual weighted by `scale`).
fn column_pass(
    nets: &AeNets,
    col: &ColumnData,
    ws: &mut Workspace,
    grads: Option<(&mut [f64], &mut [Vec<f64>], f64)>,
) -> Result<f64> {
    nets.encoder.forward_into(&col.input, &mut ws.enc_trace)?;
    let code = ws.enc_trace.output().to_vec();
    let mut sse = 0.0;
    match grads {
        None => {
            for &(i, target) in &col.targets {
                nets.decoder(i).forward_into(&code, &mut ws.dec_trace)?;
                let r = ws.dec_trace.output()[0] - target;
                sse += r * r;
            }
        }
        Some((enc_grad, dec_grads, scale)) => {
            ws.code_grad.iter_mut().for_each(|g| *g = 0.0);
            match nets.layout() {
                DecoderLayout::PerUnit => {
                    for &(i, target) in &col.targets {
                        let dec = &nets.decoders[i];
                        dec.forward_into(&code, &mut ws.dec_trace)?;
                        let r = ws.dec_trace.output()[0] - target;
                        sse += r * r;
                        dec.backward(
                            &mut ws.dec_trace,
                            &[2.0 * r * scale],
                            &mut dec_grads[i],
                            Some(&mut ws.tmp_grad),
                        )?;
                        for (g, t) in ws.code_grad.iter_mut().zip(&ws.tmp_grad) {
                            *g += t;
                        }
                    }
                }
                DecoderLayout::Shared => {
                    let dec = &nets.decoders[0];
                    dec.forward_into(&code, &mut ws.dec_trace)?;
                    let out = ws.dec_trace.output()[0];
                    let mut up = 0.0;
                    for &(_, target) in &col.targets {
                        let r = out - target;
                        sse += r * r;
                        up += 2.0 * r * scale;
                    }
                    dec.backward(
                        &mut ws.dec_trace,
                        &[up],
                        &mut dec_grads[0],
                        Some(&mut ws.code_grad),
                    )?;
                }
            }
            let upstream = ws.code_grad.clone();
            nets.encoder
                .backward(&mut ws.enc_trace, &upstream, enc_grad, None)?;
        }
    }
    Ok(sse)
}

/// Joint minibatch Adam over encoder and decoders. Minibatches are sets of
/// columns; the loss is the mean squared error over their untreated cells.
fn train_nets(mut nets: AeNets, data: &[ColumnData], config: &TrainConfig) -> Result<(AeNets, Vec<f64>)> {
    config.validate()?;
    let mut columns: Vec<usize> = (0..data.len())
        .filter(|&t| !data[t].targets.is_empty())
        .collect();
    let total_cells: usize = columns.iter().map(|&t| data[t].targets.len()).sum();
    if total_cells == 0 {
        return Err(Error::EmptyControlSet);
    }
    let batch = config.effective_batch(columns.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut enc_adam = Adam::new(nets.encoder.n_params(), config);
    let mut dec_adams: Vec<Adam> = nets
        .decoders
        .iter()
        .map(|d| Adam::new(d.n_params(), config))
        .collect();
    let mut enc_grad = vec![0.0; nets.encoder.n_params()];
    let mut dec_grads: Vec<Vec<f64>> = nets
        .decoders
        .iter()
        .map(|d| vec![0.0; d.n_params()])
        .collect();
    let mut ws = Workspace::new(&nets);
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        columns.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        for chunk in columns.chunks(batch) {
            let cells: usize = chunk.iter().map(|&t| data[t].targets.len()).sum();
            let scale = 1.0 / cells as f64;
            enc_grad.iter_mut().for_each(|g| *g = 0.0);
            for g in &mut dec_grads {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            for &t in chunk {
                epoch_sse += column_pass(
                    &nets,
                    &data[t],
                    &mut ws,
                    Some((&mut enc_grad, &mut dec_grads, scale)),
                )?;
            }
            enc_adam.step(nets.encoder.params_mut(), &enc_grad);
            nets.encoder.project();
            for ((dec, adam), g) in nets.decoders.iter_mut().zip(&mut dec_adams).zip(&dec_grads) {
                adam.step(dec.params_mut(), g);
                dec.project();
            }
        }
        let loss = epoch_sse / total_cells as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        losses.push(loss);
    }
    Ok((nets, losses))
}

fn check_shapes(y: &DMatrix<f64>, treated: &DMatrix<bool>, n_units: usize) -> Result<()> {
    if y.shape() != treated.shape() {
        return Err(Error::ShapeMismatch(format!(
            "outcomes {:?} vs indicator {:?}",
            y.shape(),
            treated.shape()
        )));
    }
    if y.nrows() != n_units {
        return Err(Error::DimensionMismatch {
            expected: n_units,
            got: y.nrows(),
        });
    }
    Ok(())
}

macro_rules! autoencoder_type {
    ($name:ident, $layout:expr, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            nets: AeNets,
            standardizer: Standardizer,
            masked_encoder: bool,
            loss_trace: Vec<f64>,
        }

        impl $name {
            /// Untrained model for a panel with `n_units` rows.
            pub fn init(n_units: usize, config: &AeConfig, seed: u64) -> Result<Self> {
                Ok(Self {
                    nets: AeNets::init(n_units, $layout, config, seed)?,
                    standardizer: Standardizer::IDENTITY,
                    masked_encoder: config.masked_encoder,
                    loss_trace: Vec::new(),
                })
            }

            /// Trains starting from the current weights.
            pub fn fit(
                self,
                y: &DMatrix<f64>,
                treated: &DMatrix<bool>,
                config: &TrainConfig,
            ) -> Result<Self> {
                self.fit_with_standardizer(y, treated, config, None)
            }

            /// Like [`Self::fit`], with an explicit standardization (the
            /// default derives it from untreated cells).
            pub fn fit_with_standardizer(
                self,
                y: &DMatrix<f64>,
                treated: &DMatrix<bool>,
                config: &TrainConfig,
                standardizer: Option<Standardizer>,
            ) -> Result<Self> {
                check_shapes(y, treated, self.nets.n_units)?;
                let std = match standardizer {
                    Some(s) => s,
                    None => Standardizer::from_controls(y, treated)?,
                };
                let data = column_data(y, treated, std, self.masked_encoder);
                let (nets, losses) = train_nets(self.nets, &data, config)?;
                Ok(Self {
                    nets,
                    standardizer: std,
                    masked_encoder: self.masked_encoder,
                    loss_trace: losses,
                })
            }

            pub fn n_units(&self) -> usize {
                self.nets.n_units
            }

            pub fn bottleneck(&self) -> usize {
                self.nets.encoder.output_dim()
            }

            pub fn encoder(&self) -> &DenseNet {
                &self.nets.encoder
            }

            pub fn standardizer(&self) -> Standardizer {
                self.standardizer
            }

            /// Per-epoch training loss in standardized units.
            pub fn loss_trace(&self) -> &[f64] {
                &self.loss_trace
            }

            /// Final-epoch training MSE over untreated cells, in outcome units.
            pub fn training_loss(&self) -> Option<f64> {
                self.loss_trace
                    .last()
                    .map(|l| l * self.standardizer.scale * self.standardizer.scale)
            }

            /// Encoder code of a raw column. Non-finite entries count as masked.
            pub fn encode(&self, column: &[f64]) -> Result<Vec<f64>> {
                if column.len() != self.nets.n_units {
                    return Err(Error::DimensionMismatch {
                        expected: self.nets.n_units,
                        got: column.len(),
                    });
                }
                let input: Vec<f64> = column
                    .iter()
                    .map(|&v| if v.is_finite() { self.standardizer.apply(v) } else { 0.0 })
                    .collect();
                self.nets.encoder.forward(&input)
            }

            /// Reconstruction of unit `unit` from a raw column `Ỹ_·t`.
            pub fn predict_cell(&self, column: &[f64], unit: usize) -> Result<f64> {
                if unit >= self.nets.n_units {
                    return Err(Error::DimensionMismatch {
                        expected: self.nets.n_units,
                        got: unit + 1,
                    });
                }
                let code = self.encode(column)?;
                let out = self.nets.decoder(unit).forward(&code)?;
                Ok(self.standardizer.invert(out[0]))
            }

            /// Reconstructs every cell of `y`. The encoder input for column `t`
            /// is built exactly as in training.
            pub fn predict_matrix(
                &self,
                y: &DMatrix<f64>,
                treated: &DMatrix<bool>,
            ) -> Result<DMatrix<f64>> {
                check_shapes(y, treated, self.nets.n_units)?;
                let n = y.nrows();
                let mut out = DMatrix::zeros(n, y.ncols());
                let mut column = vec![0.0; n];
                let mut trace = self.nets.decoders[0].new_trace();
                for t in 0..y.ncols() {
                    for (i, c) in column.iter_mut().enumerate() {
                        *c = if self.masked_encoder && treated[(i, t)] {
                            f64::NAN
                        } else {
                            y[(i, t)]
                        };
                    }
                    let code = self.encode(&column)?;
                    for i in 0..n {
                        self.nets.decoder(i).forward_into(&code, &mut trace)?;
                        out[(i, t)] = self.standardizer.invert(trace.output()[0]);
                    }
                }
                Ok(out)
            }

            /// Mean squared reconstruction error over untreated cells, in
            /// outcome units.
            pub fn control_loss(&self, y: &DMatrix<f64>, treated: &DMatrix<bool>) -> Result<f64> {
                check_shapes(y, treated, self.nets.n_units)?;
                let data = column_data(y, treated, self.standardizer, self.masked_encoder);
                let mut ws = Workspace::new(&self.nets);
                let mut sse = 0.0;
                let mut cells = 0usize;
                for col in &data {
                    sse += column_pass(&self.nets, col, &mut ws, None)?;
                    cells += col.targets.len();
                }
                if cells == 0 {
                    return Err(Error::EmptyControlSet);
                }
                let s = self.standardizer.scale;
                Ok(sse / cells as f64 * s * s)
            }
        }
    };
}

autoencoder_type!(
    MultiOutputAe,
    DecoderLayout::PerUnit,
    "Shared encoder with one decoder per unit."
);
autoencoder_type!(
    SingleOutputAe,
    DecoderLayout::Shared,
    "Shared encoder with a single decoder used for every unit."
);

impl MultiOutputAe {
    /// Same model with units relabeled: unit `k` of the result is unit
    /// `order[k]` of `self` (encoder input columns and decoders move together).
    pub fn permute_units(&self, order: &[usize]) -> Self {
        let n = self.nets.n_units;
        assert_eq!(order.len(), n);
        let mut nets = self.nets.clone();
        let hidden = nets.encoder.dims()[1];
        let old = self.nets.encoder.weight(0);
        let w = nets.encoder.weight_mut(0);
        for j in 0..hidden {
            for (k, &src) in order.iter().enumerate() {
                w[j * n + k] = old[(j, src)];
            }
        }
        nets.decoders = order.iter().map(|&i| self.nets.decoders[i].clone()).collect();
        Self {
            nets,
            ..self.clone()
        }
    }

    pub fn decoder(&self, unit: usize) -> &DenseNet {
        &self.nets.decoders[unit]
    }
}

/// Fits a multi-output autoencoder on the untreated cells of `y`.
pub fn fit_multi_output_ae(
    y: &DMatrix<f64>,
    treated: &DMatrix<bool>,
    config: &AeConfig,
) -> Result<MultiOutputAe> {
    MultiOutputAe::init(y.nrows(), config, config.train.seed)?.fit(y, treated, &config.train)
}

/// Fits the shared-decoder benchmark autoencoder on the untreated cells of `y`.
pub fn fit_single_output_ae(
    y: &DMatrix<f64>,
    treated: &DMatrix<bool>,
    config: &AeConfig,
) -> Result<SingleOutputAe> {
    SingleOutputAe::init(y.nrows(), config, config.train.seed)?.fit(y, treated, &config.train)
}
