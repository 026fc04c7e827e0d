use crate::error::{Error, Result};
use crate::loss::{self, SIDE_OUTPUTS};
use crate::par;
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Tensor};

use super::EdgeNetwork;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let param = store.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, g), m), v) in param.iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                let g = g.f64() + weight_decay * w.f64();
                let mn = beta1 * m.f64() + (1.0 - beta1) * g;
                let vn = beta2 * v.f64() + (1.0 - beta2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
                *w = T::of(w.f64() - update);
            }
        }
    }
}

/// Losses of one training step, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub sides: [f64; SIDE_OUTPUTS],
    pub fused: f64,
}

/// Network plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real = f32> {
    pub net: EdgeNetwork<T>,
    pub adam: Adam<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: EdgeNetwork<T>, config: AdamConfig) -> Self {
        let adam = Adam::new(config, &net.store);
        Self { net, adam }
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    /// Loss and parameter gradients for one `(image, gt)` pair.
    pub fn loss_and_grads(
        &self,
        image: &Tensor<T>,
        gt: &Tensor<T>,
    ) -> Result<(StepReport, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let p = self.net.store.bind(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.net.forward(&mut tape, &p, x)?;
        let terms = loss::total_loss(&mut tape, &out.sides, out.fused, gt)?;
        tape.backward(terms.total)?;
        let value = |v| tape.value(v).data()[0].f64();
        let report = StepReport {
            step: self.adam.t,
            loss: value(terms.total),
            sides: terms.sides.map(value),
            fused: value(terms.fused),
        };
        Ok((report, p.grads(&tape)))
    }

    /// One Adam update on the mean total loss of `batch`; returns the
    /// pre-update losses. Batch items run in parallel, gradients are reduced
    /// at the step boundary.
    pub fn train_step(&mut self, batch: &[(Tensor<T>, Tensor<T>)]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        for (image, gt) in batch {
            loss::check_binary(gt)?;
            let (_, h, w) = image.dims3()?;
            if gt.shape() != [1, h, w] {
                return Err(Error::Data(format!(
                    "gt shape {:?} does not match image {h}×{w}",
                    gt.shape()
                )));
            }
        }
        let results = par::map_slice(batch, |(image, gt)| self.loss_and_grads(image, gt));
        let n = batch.len() as f64;
        let mut report = StepReport {
            step: self.adam.t,
            loss: 0.0,
            sides: [0.0; SIDE_OUTPUTS],
            fused: 0.0,
        };
        let mut sum: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let (rep, grads) = r?;
            report.loss += rep.loss / n;
            report.fused += rep.fused / n;
            for (a, b) in report.sides.iter_mut().zip(rep.sides) {
                *a += b / n;
            }
            match &mut sum {
                None => {
                    sum = Some(
                        grads
                            .iter()
                            .map(|g| g.data().iter().map(|v| v.f64()).collect())
                            .collect(),
                    )
                }
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v.f64());
                    }
                }
            }
        }
        let grads: Vec<Tensor<T>> = sum
            .expect("non-empty batch")
            .into_iter()
            .zip(self.net.store.iter())
            .map(|(g, (_, t))| {
                Tensor::new(
                    t.shape().to_vec(),
                    g.into_iter().map(|v| T::of(v / n)).collect(),
                )
            })
            .collect::<Result<_>>()?;
        self.adam.step(&mut self.net.store, &grads);
        Ok(report)
    }
}
