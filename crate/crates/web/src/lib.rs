//! WebAssembly bindings for the browser demo. The logic lives in [`demo`] so
//! it can be tested natively.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: sardino::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A rendered synthetic tile.
#[wasm_bindgen]
pub struct Preview {
    inner: demo::TilePreview,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.inner.size
    }
    pub fn sar_rgba(&self) -> Vec<u8> {
        self.inner.sar.clone()
    }
    pub fn labels_rgba(&self) -> Vec<u8> {
        self.inner.labels.clone()
    }
    pub fn class_counts(&self) -> Vec<u32> {
        self.inner.class_counts.clone()
    }
}

#[wasm_bindgen]
pub fn preview_tile(seed: u64, index: usize, size: usize, channel: usize) -> Result<Preview, JsError> {
    demo::preview_tile(seed, index, size, channel).map(|inner| Preview { inner }).map_err(js)
}

#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    sardino::geodata::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[wasm_bindgen]
pub fn palette() -> Vec<u8> {
    demo::PALETTE.concat()
}

#[wasm_bindgen]
pub struct Trainer {
    inner: demo::Trainer,
    strip_width: usize,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, centering: bool, learning_rate: f64) -> Result<Trainer, JsError> {
        Ok(Trainer { inner: demo::Trainer::new(seed, centering, learning_rate).map_err(js)?, strip_width: 0 })
    }

    /// Runs `n` steps and returns `[epoch, loss, teacher entropy, teacher temperature]`.
    pub fn train(&mut self, n: usize) -> Result<Vec<f64>, JsError> {
        let s = self.inner.train(n).map_err(js)?;
        Ok(vec![s.epoch, s.loss, s.teacher_entropy, s.teacher_temp])
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> u64 {
        self.inner.steps()
    }

    #[wasm_bindgen(getter)]
    pub fn num_heads(&self) -> usize {
        self.inner.num_heads()
    }

    #[wasm_bindgen(getter)]
    pub fn max_entropy(&self) -> f64 {
        (self.inner.out_dim() as f64).ln()
    }

    pub fn teacher_entropy(&self) -> Result<f64, JsError> {
        self.inner.teacher_entropy().map_err(js)
    }

    /// RGBA strip: input band, one panel per head, labels. Width via `strip_width`.
    pub fn attention(&mut self, tile: usize, scale: usize) -> Result<Vec<u8>, JsError> {
        let (w, _, px) = self.inner.attention_strip(tile, scale).map_err(js)?;
        self.strip_width = w;
        Ok(px)
    }

    #[wasm_bindgen(getter)]
    pub fn strip_width(&self) -> usize {
        self.strip_width
    }
}

/// Teacher probabilities for `logits`, with the entropy appended as the last element.
#[wasm_bindgen]
pub fn explore(logits: Vec<f32>, center: Vec<f32>, tau: f64) -> Result<Vec<f32>, JsError> {
    let e = demo::explore(&logits, &center, tau).map_err(js)?;
    let mut out = e.probs;
    out.push(e.entropy as f32);
    Ok(out)
}

#[wasm_bindgen]
pub fn teacher_temperature(epoch: f64) -> f64 {
    demo::schedule(epoch)
}

#[wasm_bindgen]
pub fn random_logits(k: usize, seed: u64) -> Vec<f32> {
    demo::random_logits(k, seed)
}
