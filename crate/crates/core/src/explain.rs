//! Explanation artifacts: attention heatmaps over images, the pairwise
//! matching matrix, and binary PGM/PPM image files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::matcher::average_supports;
use crate::model::{Mtunet, Representation};
use crate::tensor::Tensor;

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Mean of the pattern rows of a z×l attention matrix.
pub fn overall_attention(attention: &Tensor) -> Result<Vec<f64>> {
    let (z, l) = attention.dims2()?;
    let mut out = vec![0.0; l];
    for k in 0..z {
        out.iter_mut().zip(attention.row(k)).for_each(|(o, a)| *o += a);
    }
    out.iter_mut().for_each(|o| *o /= z as f64);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapSource {
    Pattern(usize),
    Overall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub source: HeatmapSource,
    pub row: Vec<f64>,
    /// H×W values in [0, 1].
    pub map: Tensor,
}

/// Reshapes `row` to h×w, min-max normalizes it (over `range` when given,
/// else over the row; a constant map becomes 0.5) and upsamples it to
/// `out_h×out_w` with corner-aligned bilinear sampling.
pub fn render_heatmap(
    source: HeatmapSource,
    row: &[f64],
    grid: (usize, usize),
    out: (usize, usize),
    range: Option<(f64, f64)>,
) -> Result<Heatmap> {
    let (h, w) = grid;
    let (oh, ow) = out;
    if row.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim(format!("{} attention values do not form a {h}×{w} grid", row.len())));
    }
    if oh < h || ow < w {
        return Err(Error::dim(format!("cannot render a {h}×{w} map at {oh}×{ow}")));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let norm: Vec<f64> = if hi > lo {
        row.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; row.len()]
    };
    let coord = |i: usize, n_out: usize, n_in: usize| {
        if n_out > 1 {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = coord(y, oh, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..ow {
            let sx = coord(x, ow, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let at = |r: usize, c: usize| norm[r * w + c];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Heatmap {
        source,
        row: row.to_vec(),
        map: Tensor::new(vec![oh, ow], data)?,
    })
}

/// `(1 − α) · gray(image) + α · colormap(heat)`, with a linear blue→red
/// colormap, clamped to [0, 1].
pub fn overlay(image: &Tensor, heat: &Tensor, alpha: f64) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || heat.shape() != [h, w] {
        return Err(Error::dim(format!("overlay of heatmap {:?} on image {:?}", heat.shape(), image.shape())));
    }
    let px = h * w;
    let src = image.data();
    let mut out = vec![0.0; 3 * px];
    for i in 0..px {
        let gray = 0.299 * src[i] + 0.587 * src[px + i] + 0.114 * src[2 * px + i];
        let v = heat.data()[i];
        let color = [v, 0.0, 1.0 - v];
        for ch in 0..3 {
            out[ch * px + i] = ((1.0 - alpha) * gray + alpha * color[ch]).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Scores in percent; rows are support categories, columns queries.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchMatrix {
    pub names: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl MatchMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!("support,{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(&self.scores) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(out, "{name},{}", cells.join(",")).unwrap();
        }
        out
    }
}

/// Images shown for one episode: the first support and first query of
/// every category.
pub fn explained_images(episode: &Episode) -> Result<(Vec<usize>, Vec<usize>)> {
    let first = |list: &[(usize, usize)], k: usize| {
        list.iter()
            .find(|(_, l)| *l == k)
            .map(|(id, _)| *id)
            .ok_or_else(|| Error::usage(format!("episode has no image for slot {k}")))
    };
    let supports = (0..episode.way()).map(|k| first(&episode.support, k)).collect::<Result<_>>()?;
    let queries = (0..episode.way()).map(|k| first(&episode.query, k)).collect::<Result<_>>()?;
    Ok((supports, queries))
}

/// Entry `(k, k′)` is `100 · s(query of category k′, supports of k)`.
pub fn matching_matrix(model: &Mtunet, ds: &Dataset, episode: &Episode) -> Result<MatchMatrix> {
    let (_, queries) = explained_images(episode)?;
    let support_ids: Vec<usize> = episode.support.iter().map(|(id, _)| *id).collect();
    let clf = model.classifier(ds, &[support_ids, queries.clone()].concat())?;
    let centroids = (0..episode.way())
        .map(|k| {
            let vs: Vec<&[f64]> = episode.support_of(k).map(|id| clf.features[&id].as_slice()).collect();
            average_supports(&vs)
        })
        .collect::<Result<Vec<_>>>()?;
    let query_vs: Vec<Vec<f64>> = queries.iter().map(|id| clf.features[id].clone()).collect();
    let s = model.matcher.scores(&query_vs, &centroids)?;
    let k = episode.way();
    let scores = (0..k).map(|row| (0..k).map(|col| 100.0 * s[col][row]).collect()).collect();
    Ok(MatchMatrix {
        names: episode.categories.iter().map(|&c| ds.category(c).name.clone()).collect(),
        scores,
    })
}

/// Pattern heatmaps followed by the overall heatmap of one image.
pub fn image_heatmaps(rep: &Representation, size: (usize, usize), global_norm: bool) -> Result<Vec<Heatmap>> {
    let range = global_norm.then(|| {
        rep.attention
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let (z, _) = rep.attention.dims2()?;
    let mut maps = Vec::with_capacity(z + 1);
    for i in 0..z {
        maps.push(render_heatmap(HeatmapSource::Pattern(i), rep.attention.row(i), rep.grid, size, range)?);
    }
    let overall = overall_attention(&rep.attention)?;
    maps.push(render_heatmap(HeatmapSource::Overall, &overall, rep.grid, size, range)?);
    Ok(maps)
}

/// Writes per-pattern and overall overlays for the first support and
/// first query of every category, plus `matrix.csv`. Returns the files
/// written, in order.
pub fn export_explanation(
    model: &Mtunet,
    ds: &Dataset,
    episode: &Episode,
    dir: &Path,
    global_norm: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (supports, queries) = explained_images(episode)?;
    let mut written = Vec::new();
    for (role, ids) in [("support", &supports), ("query", &queries)] {
        for (k, &id) in ids.iter().enumerate() {
            let img = ds.image(id)?;
            let (_, h, w) = img.dims3()?;
            let rep = model.represent(&img)?;
            for heat in image_heatmaps(&rep, (h, w), global_norm)? {
                let name = match heat.source {
                    HeatmapSource::Pattern(i) => format!("{role}_{k}_pattern_{i}.ppm"),
                    HeatmapSource::Overall => format!("{role}_{k}_overall.ppm"),
                };
                let path = dir.join(name);
                write_image(&path, &overlay(&img, &heat.map, OVERLAY_ALPHA)?)?;
                written.push(path);
            }
        }
    }
    let matrix = matching_matrix(model, ds, episode)?;
    let path = dir.join("matrix.csv");
    fs::write(&path, matrix.to_csv()).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::usage(format!("cannot encode a {c}-channel image"))),
    };
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::usage(format!("pixel value {v} outside [0, 1]")));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let px = h * w;
    for i in 0..px {
        for ch in 0..c {
            out.push((255.0 * image.data()[ch * px + i]).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_image(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |m: &str| Error::load(path, m);
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let c = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    if num(token()?)? != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if pos >= bytes.len() {
        return Err(bad("truncated header"));
    }
    let payload = &bytes[pos + 1..];
    let px = h * w;
    if payload.len() != c * px {
        return Err(bad(&format!("expected {} payload bytes, found {}", c * px, payload.len())));
    }
    let mut data = vec![0.0; c * px];
    for i in 0..px {
        for ch in 0..c {
            data[ch * px + i] = payload[i * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_examples() {
        assert_eq!(overall_attention(&Tensor::from_rows(&[&[0.2, 0.7]])).unwrap(), vec![0.2, 0.7]);
        assert_eq!(overall_attention(&Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap(), vec![0.5, 0.5]);
        assert_eq!(overall_attention(&Tensor::zeros(&[3, 2])).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn heatmap_rules() {
        let flat = render_heatmap(HeatmapSource::Overall, &[0.3; 4], (2, 2), (5, 5), None).unwrap();
        assert!(flat.map.data().iter().all(|&v| v == 0.5));
        let hot = render_heatmap(HeatmapSource::Pattern(0), &[1.0, 0.0, 0.0, 0.0], (2, 2), (7, 9), None).unwrap();
        assert_eq!(hot.map.data()[0], 1.0);
        assert_eq!(hot.map.data().iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert!(hot.map.data()[1..].iter().all(|&v| v < 1.0));
        assert!(render_heatmap(HeatmapSource::Overall, &[0.0; 5], (2, 2), (4, 4), None).is_err());
    }

    #[test]
    fn heatmap_scale_invariance() {
        let row = [0.1, 0.5, 0.2, 0.9, 0.4, 0.3];
        let scaled: Vec<f64> = row.iter().map(|v| 5.0 * v).collect();
        let a = render_heatmap(HeatmapSource::Overall, &row, (2, 3), (8, 12), None).unwrap();
        let b = render_heatmap(HeatmapSource::Overall, &scaled, (2, 3), (8, 12), None).unwrap();
        assert!(a.map.max_abs_diff(&b.map) < 1e-15);
    }

    #[test]
    fn overlay_formula() {
        let img = Tensor::full(&[3, 2, 2], 0.6);
        let zero = Tensor::zeros(&[2, 2]);
        let o = overlay(&img, &zero, 0.5).unwrap();
        assert!((o.data()[0] - 0.3).abs() < 1e-12);
        assert!((o.data()[8] - 0.8).abs() < 1e-12);
        let plain = overlay(&img, &zero, 0.0).unwrap();
        assert!(plain.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn pnm_header_and_round_trip() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = decode_image(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode_image(&back).unwrap(), bytes);
        let white = encode_image(&Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(*white.last().unwrap(), 0xFF);
        assert!(matches!(encode_image(&Tensor::full(&[3, 1, 1], 1.5)), Err(Error::Usage(_))));
    }

    #[test]
    fn ppm_interleaves_channels() {
        let img = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 0, 0, 255, 0]);
        assert_eq!(decode_image(&bytes, Path::new("mem")).unwrap(), img);
    }

    #[test]
    fn csv_layout() {
        let m = MatchMatrix {
            names: vec!["a".into(), "b".into()],
            scores: vec![vec![50.0, 12.5], vec![0.0, 100.0]],
        };
        assert_eq!(m.to_csv(), "support,a,b\na,50.0000,12.5000\nb,0.0000,100.0000\n");
    }
}
