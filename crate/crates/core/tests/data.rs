use ersm_core::data::{generate, split, Background, GeneratorConfig, Sample};
use ersm_core::energy_mask::{tokenize, NeighborTable};

fn object_crop(s: &Sample, size: usize, width: usize) -> Vec<f64> {
    let first = s.truth_mask.iter().position(|&v| v == 1).unwrap();
    let (y0, x0) = (first / width, first % width);
    let img = s.image.data();
    let mut out = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            assert_eq!(s.truth_mask[y * width + x], 1);
            out.push(img[y * width + x]);
        }
    }
    out
}

#[test]
fn class_counts_are_near_uniform() {
    let cfg = GeneratorConfig { seed: 5, ..Default::default() };
    let data = generate(&cfg, 4000).unwrap();
    let mut counts = [0usize; 4];
    for s in &data {
        counts[s.label] += 1;
    }
    for c in counts {
        assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
    }
}

#[test]
fn every_sample_plants_one_object_of_the_configured_area() {
    let cfg = GeneratorConfig { seed: 2, ..Default::default() };
    for s in generate(&cfg, 50).unwrap() {
        let area = s.truth_mask.iter().filter(|&&v| v == 1).count();
        assert_eq!(area, cfg.object_size * cfg.object_size);
        object_crop(&s, cfg.object_size, cfg.width);
    }
}

/// Softmax regression on object crops, full-batch gradient descent.
#[test]
fn linear_probe_separates_noiseless_objects() {
    let cfg = GeneratorConfig { noise: 0.0, seed: 9, ..Default::default() };
    let data = generate(&cfg, 400).unwrap();
    let d = cfg.object_size * cfg.object_size;
    let k = cfg.classes;
    let xs: Vec<Vec<f64>> = data.iter().map(|s| object_crop(s, cfg.object_size, cfg.width)).collect();
    let (mut w, mut b) = (vec![0.0; k * d], vec![0.0; k]);
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect()
    };
    for _ in 0..200 {
        let (mut gw, mut gb) = (vec![0.0; k * d], vec![0.0; k]);
        for (x, s) in xs.iter().zip(&data) {
            let z = logits(&w, &b, x);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / sum - if c == s.label { 1.0 } else { 0.0 };
                gb[c] += g;
                for j in 0..d {
                    gw[c * d + j] += g * x[j];
                }
            }
        }
        let step = 0.5 / xs.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= step * g);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= step * g);
    }
    let correct = xs
        .iter()
        .zip(&data)
        .filter(|(x, s)| {
            let z = logits(&w, &b, x);
            (0..k).max_by(|&i, &j| z[i].total_cmp(&z[j])).unwrap() == s.label
        })
        .count();
    assert!(correct as f64 / xs.len() as f64 >= 0.95, "{correct}/{}", xs.len());
}

#[test]
fn background_tokens_are_more_redundant_than_object_tokens() {
    let cfg = GeneratorConfig { seed: 4, ..Default::default() };
    let patch = 4;
    let (gh, gw) = (cfg.height / patch, cfg.width / patch);
    let table = NeighborTable::new(gh, gw);
    let (mut bg, mut nbg, mut obj, mut nobj) = (0.0, 0usize, 0.0, 0usize);
    for s in generate(&cfg, 100).unwrap() {
        let tokens = tokenize(&s.image, patch).unwrap();
        let dim = tokens.normalized.shape()[1];
        let rows = tokens.normalized.data();
        let touches_object = |t: usize| {
            let (ty, tx) = (t / gw, t % gw);
            (0..patch).any(|y| (0..patch).any(|x| s.truth_mask[(ty * patch + y) * cfg.width + tx * patch + x] == 1))
        };
        for i in 0..gh * gw {
            for &j in table.neighbors(i) {
                let cos: f64 =
                    rows[i * dim..(i + 1) * dim].iter().zip(&rows[j * dim..(j + 1) * dim]).map(|(a, b)| a * b).sum();
                match (touches_object(i), touches_object(j)) {
                    (false, false) => {
                        bg += cos;
                        nbg += 1;
                    }
                    (true, true) => {
                        obj += cos;
                        nobj += 1;
                    }
                    _ => {}
                }
            }
        }
    }
    assert!(bg / nbg as f64 > obj / nobj as f64, "background {} object {}", bg / nbg as f64, obj / nobj as f64);
}

#[test]
fn split_sizes_and_determinism() {
    let cfg = GeneratorConfig { seed: 1, background: Background::Constant, ..Default::default() };
    let labels: Vec<usize> = generate(&cfg, 100).unwrap().iter().map(|s| s.label).collect();
    let (tr, te) = split(&labels, (0.8, 0.2), 3).unwrap();
    assert_eq!((tr.len(), te.len()), (80, 20));
    assert_eq!(split(&labels, (0.8, 0.2), 3).unwrap(), (tr, te));
    assert!(split(&labels, (1.0, 0.0), 3).is_err());
    assert!(split(&labels, (0.7, 0.2), 3).is_err());
}

#[test]
fn dataset_bytes_depend_only_on_config() {
    let cfg = GeneratorConfig { seed: 11, ..Default::default() };
    let a = generate(&cfg, 20).unwrap();
    let b = generate(&cfg, 20).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!((x.label, &x.truth_mask), (y.label, &y.truth_mask));
    }
}
