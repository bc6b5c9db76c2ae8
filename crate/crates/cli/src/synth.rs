//! Synthetic fixtures: labeled Gaussian embeddings and a small annotated slide.

use std::path::Path;

use histoatlas_core::annotation::LabelTable;
use histoatlas_core::embedding_io::{write_embeddings, EmbeddingSet};
use histoatlas_core::patching::{save_png, synthesize, ConcentrationMap, PatchRecord, StainMatrix};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::CliError;

/// Isotropic Gaussian classes. Class `c` is centered on `separation / √2`
/// along axis `c`, so every pair of centers is `separation` apart.
#[derive(Debug, Clone)]
pub struct GaussianClasses {
    pub classes: u32,
    pub dim: usize,
    pub sigma: f64,
    pub separation: f64,
}

impl GaussianClasses {
    pub fn center(&self, class: u32) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        c[class as usize] = self.separation / 2f64.sqrt();
        c
    }

    /// `per_class` draws of every class. Records get ids `<prefix>_<class>_<i>`
    /// and slide ids `<prefix>_slide_<class>`.
    pub fn sample(&self, per_class: usize, prefix: &str, rng: &mut ChaCha8Rng) -> EmbeddingSet {
        assert!(self.classes as usize <= self.dim, "need dim >= classes");
        let noise = Normal::new(0.0, self.sigma).expect("valid sigma");
        let mut rows = Vec::with_capacity(per_class * self.classes as usize);
        let mut recs = Vec::with_capacity(rows.capacity());
        for c in 0..self.classes {
            let center = self.center(c);
            for i in 0..per_class {
                rows.push(center.iter().map(|m| (m + noise.sample(rng)) as f32).collect());
                recs.push(PatchRecord::from_ids(
                    format!("{prefix}_{c}_{i}"),
                    format!("{prefix}_slide_{c}"),
                    c,
                ));
            }
        }
        EmbeddingSet::from_rows(rows, recs).expect("finite draws")
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    pub classes: u32,
    pub dim: usize,
    pub atlas_per_class: usize,
    pub test_per_class: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 5,
            dim: 16,
            atlas_per_class: 40,
            test_per_class: 10,
        }
    }
}

const SLIDE: u32 = 1024;

fn slide_image(rng: &mut ChaCha8Rng) -> RgbImage {
    let m = StainMatrix::hematoxylin_eosin();
    let tissue = ConcentrationMap {
        width: 2,
        height: 1,
        data: vec![[0.9, 0.2, 0.0], [0.1, 0.6, 0.0]],
    };
    let colors = synthesize(&tissue, &m);
    let (nucleus, stroma) = (*colors.get_pixel(0, 0), *colors.get_pixel(1, 0));
    RgbImage::from_fn(SLIDE, SLIDE, |x, _| {
        if x < SLIDE / 2 {
            // cellular half: about a third of the pixels are nuclei
            if rng.random_bool(0.35) {
                nucleus
            } else {
                stroma
            }
        } else {
            Rgb([255, 255, 255])
        }
    })
}

fn annotations_xml() -> String {
    let poly = |name: &str, group: &str, pts: &[(u32, u32)]| {
        let coords: String = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y))| format!("        <Coordinate Order=\"{i}\" X=\"{x}\" Y=\"{y}\"/>\n"))
            .collect();
        format!(
            "    <Annotation Name=\"{name}\" Type=\"Polygon\" PartOfGroup=\"{group}\" Color=\"#F4FA58\">\n      <Coordinates>\n{coords}      </Coordinates>\n    </Annotation>\n"
        )
    };
    let h = SLIDE / 2;
    format!(
        "<?xml version=\"1.0\"?>\n<ASAP_Annotations>\n  <Annotations>\n{}{}  </Annotations>\n</ASAP_Annotations>\n",
        poly("cellular", "class_0", &[(8, 8), (h - 8, 8), (h - 8, SLIDE - 8), (8, SLIDE - 8)]),
        poly("blank", "class_1", &[(h + 8, 8), (SLIDE - 8, 8), (SLIDE - 8, SLIDE - 8), (h + 8, SLIDE - 8)]),
    )
}

/// Writes `labels.json`, `atlas.emb`, `test.emb`, `slide.png` and
/// `annotations.xml` into `dir`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = GaussianClasses {
        classes: spec.classes,
        dim: spec.dim.max(spec.classes as usize),
        sigma: 1.0,
        separation: 10.0,
    };
    let atlas = g.sample(spec.atlas_per_class, "atlas", &mut rng);
    let test = g.sample(spec.test_per_class, "test", &mut rng);
    let labels = LabelTable::synthetic(0, spec.classes);
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    };
    write("labels.json", labels.to_json())?;
    write("annotations.xml", annotations_xml())?;
    write_embeddings(&atlas, &dir.join("atlas.emb"))?;
    write_embeddings(&test, &dir.join("test.emb"))?;
    save_png(&dir.join("slide.png"), &slide_image(&mut rng))?;
    Ok(())
}
