//! Grad-CAM heatmaps over a network's final convolutional activations.
//!
//! The class score is the pre-sigmoid logit for the positive class and its
//! negation for the negative class. Channel importances are spatial means of
//! the score's gradient over the activation stack; the heatmap is the ReLU of
//! the importance-weighted channel sum, upsampled bilinearly to the input.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::image::{Image, RgbImage};
use crate::nn::{to_batch, MicroNet, Tensor};
use crate::scalar::Scalar;

/// One importance weight per feature-map channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImportance<T> {
    pub alpha: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamHeatmap<T> {
    pub map: Image<T>,
    pub source_layer: String,
    pub class_id: Label,
}

/// `[C, H, W]` view of a stack, accepting a leading batch of one.
fn chw<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        ref s => Err(Error::shape(what.to_string(), format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Spatial mean of each gradient channel.
pub fn channel_importance<T: Scalar>(grads: &Tensor<T>) -> Result<ChannelImportance<T>> {
    let [c, h, w] = chw(grads, "channel_importance")?;
    let z = T::from_count(h * w);
    let alpha = grads
        .data()
        .chunks_exact(h * w)
        .take(c)
        .map(|plane| plane.iter().copied().sum::<T>() / z)
        .collect();
    Ok(ChannelImportance { alpha })
}

/// `ReLU(sum_k alpha_k A^k)` at the activation resolution.
pub fn compute_cam<T: Scalar>(alpha: &ChannelImportance<T>, activations: &Tensor<T>) -> Result<Image<T>> {
    let [c, h, w] = chw(activations, "compute_cam")?;
    if alpha.alpha.len() != c {
        return Err(Error::shape(
            "compute_cam",
            format!("{} importances for {c} channels", alpha.alpha.len()),
        ));
    }
    let mut acc = vec![T::zero(); h * w];
    for (plane, &a) in activations.data().chunks_exact(h * w).zip(&alpha.alpha) {
        for (o, &v) in acc.iter_mut().zip(plane) {
            *o += a * v;
        }
    }
    Image::new(w, h, acc.into_iter().map(|v| v.max(T::zero())).collect())
}

/// Grad-CAM for `image` (`H x W`, matching the network input) and class `class_id`,
/// upsampled to the input resolution.
pub fn explain<T: Scalar>(net: &MicroNet<T>, image: &Image<T>, class_id: Label) -> Result<CamHeatmap<T>> {
    let (cam, _) = explain_raw(net, image, class_id)?;
    let map = cam.resize_bilinear(image.width(), image.height())?;
    let l = net.cam_layer();
    Ok(CamHeatmap {
        map,
        source_layer: format!("layers[{l}]:{}", net.layers()[l].spec.kind.name()),
        class_id,
    })
}

/// Heatmap at the activation resolution plus the importance weights.
pub fn explain_raw<T: Scalar>(net: &MicroNet<T>, image: &Image<T>, class_id: Label) -> Result<(Image<T>, ChannelImportance<T>)> {
    let cache = net.infer(&to_batch(&[image])?)?;
    let sign = if class_id.is_positive() { T::one() } else { -T::one() };
    let grads = net.backward_from_logits(&cache, &[sign])?;
    let importance = channel_importance(&grads.cam_activation_grad)?;
    let cam = compute_cam(&importance, cache.cam_activations())?;
    Ok((cam, importance))
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize<T: Scalar>(map: &Image<T>) -> Image<T> {
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    if !(span > T::zero()) {
        return map.map(|_| T::zero());
    }
    map.map(|v| (v - lo) / span)
}

/// Blue (0) to red (1).
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

pub const OVERLAY_OPACITY: f64 = 0.5;

/// Grayscale rendered as RGB.
pub fn gray_to_rgb<T: Scalar>(image: &Image<T>) -> RgbImage {
    let data = image.to_u8().into_iter().flat_map(|g| [g, g, g]).collect();
    RgbImage {
        width: image.width(),
        height: image.height(),
        data,
    }
}

/// Blends the normalized heatmap over the image. Each pixel's opacity is
/// `0.5 * heat`, so zero heat leaves the grayscale pixel unchanged.
pub fn render_overlay<T: Scalar>(cam: &CamHeatmap<T>, image: &Image<T>) -> Result<RgbImage> {
    let map = if (cam.map.width(), cam.map.height()) == (image.width(), image.height()) {
        cam.map.clone()
    } else {
        cam.map.resize_bilinear(image.width(), image.height())?
    };
    let heat = normalize(&map);
    let mut data = Vec::with_capacity(3 * image.data().len());
    for (&h, &g) in heat.data().iter().zip(image.data()) {
        let g = (g.as_f64().clamp(0.0, 1.0) * 255.0).round();
        let h = h.as_f64();
        let a = OVERLAY_OPACITY * h;
        for c in colormap(h) {
            data.push(((1.0 - a) * g + a * c as f64).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage {
        width: image.width(),
        height: image.height(),
        data,
    })
}

/// Intensity-weighted center `(x, y)` of a heatmap, or `None` if it is all zero.
pub fn mass_centroid<T: Scalar>(map: &Image<T>) -> Option<(f64, f64)> {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..map.height() {
        for x in 0..map.width() {
            let v = map.get(x, y).as_f64();
            m += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    (m > 0.0).then(|| (sx / m, sy / m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub class_id: Label,
    pub source_layer: String,
    pub model_id: String,
}

/// Writes `<stem>.ppm` (overlay), `<stem>_cam.pgm` (normalized raw map) and
/// `<stem>.json` into `dir`.
pub fn export<T: Scalar>(cam: &CamHeatmap<T>, image: &Image<T>, model_id: &str, dir: &Path, stem: &str) -> Result<()> {
    render_overlay(cam, image)?.write_ppm(&dir.join(format!("{stem}.ppm")))?;
    normalize(&cam.map).write_pgm(&dir.join(format!("{stem}_cam.pgm")))?;
    let sidecar = HeatmapSidecar {
        class_id: cam.class_id,
        source_layer: cam.source_layer.clone(),
        model_id: model_id.to_string(),
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn importance_examples() {
        let g = t(vec![1, 2, 2], vec![1.0, -1.0, 2.0, 0.0]);
        assert_eq!(channel_importance(&g).unwrap().alpha, vec![0.5]);
        let c = t(vec![2, 2, 2], vec![3.0; 4].into_iter().chain(vec![0.0; 4]).collect());
        assert_eq!(channel_importance(&c).unwrap().alpha, vec![3.0, 0.0]);
    }

    #[test]
    fn cam_examples() {
        let a = t(vec![1, 2, 2], vec![1.0, -1.0, 2.0, 0.0]);
        let cam = compute_cam(&ChannelImportance { alpha: vec![0.5] }, &a).unwrap();
        assert_eq!(cam.data(), &[0.5, 0.0, 1.0, 0.0]);

        let zero = compute_cam(&ChannelImportance { alpha: vec![0.0] }, &a).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let cancel = t(vec![2, 2, 2], vec![1.0, -1.0, 2.0, 0.0, -1.0, 1.0, -2.0, 0.0]);
        let cam = compute_cam(&ChannelImportance { alpha: vec![1.0, 1.0] }, &cancel).unwrap();
        assert!(cam.data().iter().all(|&v| v == 0.0));

        assert!(compute_cam(&ChannelImportance { alpha: vec![1.0, 1.0] }, &a).is_err());
    }

    fn cam_of(map: Image<f64>) -> CamHeatmap<f64> {
        CamHeatmap {
            map,
            source_layer: "test".into(),
            class_id: Label::Positive,
        }
    }

    #[test]
    fn zero_and_constant_cams_are_transparent() {
        let img = Image::from_fn(5, 4, |x, y| (x + y) as f64 / 8.0);
        let gray = gray_to_rgb(&img);
        assert_eq!(render_overlay(&cam_of(Image::filled(5, 4, 0.0)), &img).unwrap(), gray);
        assert_eq!(render_overlay(&cam_of(Image::filled(5, 4, 0.7)), &img).unwrap(), gray);
    }

    #[test]
    fn single_hot_pixel_is_the_only_red_pixel() {
        let img = Image::filled(4, 4, 0.2);
        let mut map = vec![0.0; 16];
        map[6] = 3.0;
        let cam = cam_of(Image::new(4, 4, map).unwrap());
        let heat = normalize(&cam.map);
        let red: Vec<usize> = (0..16).filter(|&i| colormap(heat.data()[i]) == [255, 0, 0]).collect();
        assert_eq!(red, vec![6]);
        let out = render_overlay(&cam, &img).unwrap();
        let gray = gray_to_rgb(&img);
        let changed: Vec<usize> = (0..16).filter(|&i| out.data[3 * i..3 * i + 3] != gray.data[3 * i..3 * i + 3]).collect();
        assert_eq!(changed, vec![6]);
        let g = (0.2f64 * 255.0).round();
        assert_eq!(out.pixel(2, 1), [(0.5 * g + 127.5).round() as u8, (0.5 * g).round() as u8, (0.5 * g).round() as u8]);
    }

    #[test]
    fn scale_covariance() {
        let a = t(vec![2, 3, 3], (0..18).map(|i| ((i * 7) % 5) as f64 - 1.5).collect());
        let alpha = ChannelImportance { alpha: vec![0.8, -0.3] };
        let base = compute_cam(&alpha, &a).unwrap();
        let img = Image::from_fn(3, 3, |x, y| (x * 3 + y) as f64 / 9.0);
        let overlay = render_overlay(&cam_of(base.clone()), &img).unwrap();
        for lambda in [0.5, 2.0, 4.0] {
            let scaled = compute_cam(&alpha, &a.scale(lambda)).unwrap();
            for (s, b) in scaled.data().iter().zip(base.data()) {
                assert!((s - lambda * b).abs() < 1e-12);
            }
            assert_eq!(render_overlay(&cam_of(scaled), &img).unwrap(), overlay);
        }
    }

    #[test]
    fn centroid() {
        let mut m = Image::filled(5, 5, 0.0);
        assert_eq!(mass_centroid(&m), None);
        m = Image::from_fn(5, 5, |x, y| if (x, y) == (1, 3) || (x, y) == (3, 3) { 1.0 } else { 0.0 });
        assert_eq!(mass_centroid(&m), Some((2.0, 3.0)));
    }
}
