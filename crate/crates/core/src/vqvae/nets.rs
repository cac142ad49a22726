//! Encoder, decoder and discriminator networks. Strided convolutions carry
//! the downsampling; transposed convolutions mirror them on the way up.
//! Kernel 2s with padding s/2 at stride s changes the length by exactly s.

use super::VqVaeConfig;
use crate::nn::{Conv1dLayer, ConvT1dLayer};
use crate::tape::{Tape, Var};
use crate::tensor::ParamStore;
use rand::Rng;

const LEAKY_SLOPE: f64 = 0.2;

pub struct Encoder {
    pre: Conv1dLayer,
    stages: Vec<Conv1dLayer>,
    post: Conv1dLayer,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &VqVaeConfig, rng: &mut R) -> Self {
        let first = cfg.encoder_channels[0];
        let pre = Conv1dLayer::new(store, "enc.pre", 1, first, 7, 1, 3, rng);
        let mut stages = Vec::new();
        let mut c_in = first;
        for (i, (&s, &c_out)) in cfg
            .downsampling_scales
            .iter()
            .zip(&cfg.encoder_channels)
            .enumerate()
        {
            stages.push(Conv1dLayer::new(
                store,
                &format!("enc.down{i}"),
                c_in,
                c_out,
                2 * s,
                s,
                s / 2,
                rng,
            ));
            c_in = c_out;
        }
        let post = Conv1dLayer::new(store, "enc.post", c_in, cfg.codebook_dim, 3, 1, 1, rng);
        Encoder { pre, stages, post }
    }

    /// [1, T] -> [N, dim] with N = T / DSF.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = self.pre.forward(tape, store, x);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        for stage in &self.stages {
            h = stage.forward(tape, store, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let h = self.post.forward(tape, store, h);
        tape.transpose(h)
    }
}

pub struct Decoder {
    pre: Conv1dLayer,
    stages: Vec<ConvT1dLayer>,
    refine: Vec<Conv1dLayer>,
    post: Conv1dLayer,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &VqVaeConfig, rng: &mut R) -> Self {
        let first = cfg.decoder_channels[0];
        let pre = Conv1dLayer::new(store, "dec.pre", cfg.codebook_dim, first, 3, 1, 1, rng);
        let mut stages = Vec::new();
        let mut refine = Vec::new();
        let mut c_in = first;
        for (i, (&s, &c_out)) in cfg
            .upsampling_scales
            .iter()
            .zip(&cfg.decoder_channels)
            .enumerate()
        {
            stages.push(ConvT1dLayer::new(
                store,
                &format!("dec.up{i}"),
                c_in,
                c_out,
                2 * s,
                s,
                s / 2,
                rng,
            ));
            refine.push(Conv1dLayer::new(
                store,
                &format!("dec.refine{i}"),
                c_out,
                c_out,
                3,
                1,
                1,
                rng,
            ));
            c_in = c_out;
        }
        let post = Conv1dLayer::new(store, "dec.post", c_in, 1, 7, 1, 3, rng);
        Decoder { pre, stages, refine, post }
    }

    /// [N, dim] -> [1, T] with T = N * DSF; final tanh keeps output in
    /// (-1, 1).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let zt = tape.transpose(z);
        let mut h = self.pre.forward(tape, store, zt);
        for (stage, refine) in self.stages.iter().zip(&self.refine) {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = stage.forward(tape, store, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = refine.forward(tape, store, h);
        }
        let h = self.post.forward(tape, store, h);
        tape.tanh(h)
    }
}

pub struct Discriminator {
    layers: Vec<Conv1dLayer>,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &VqVaeConfig, k: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in cfg.disc_channels.iter().enumerate() {
            let (kernel, stride, pad) = if i == 0 { (7, 1, 3) } else { (8, 4, 2) };
            layers.push(Conv1dLayer::new(
                store,
                &format!("disc{k}.l{i}"),
                c_in,
                c_out,
                kernel,
                stride,
                pad,
                rng,
            ));
            c_in = c_out;
        }
        let last = cfg.disc_channels.len();
        layers.push(Conv1dLayer::new(
            store,
            &format!("disc{k}.l{last}"),
            c_in,
            1,
            3,
            1,
            1,
            rng,
        ));
        Discriminator { layers }
    }

    /// Returns every layer output; the last is the per-frame decision map.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Vec<Var> {
        let mut features = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
            features.push(h);
        }
        features
    }
}
