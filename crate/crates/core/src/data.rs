//! The tube-thickness regression task: random elliptical rings, their
//! minimal and maximal wall thickness, measured sinograms, and the binary
//! dataset format. Also reads IDX image files.
//!
//! # Dataset layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "EQMD"  u32 version  u64 header_len  header_len bytes of JSON (DatasetHeader)
//! n_sensors × (f64 r, f64 φ)
//! n_records × (outer: cx cy a b ψ density, inner: same, d_min, d_max, y[n_sensors])
//! ```

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::PointY;
use crate::error::{usage, Error, Result};
use crate::group::{uniform, Vec2};
use crate::tensor::Tensor;
use crate::tomo::{
    add_noise, build_sensors, csv_err, measure, Ellipse, Geometry, GridLayout, Phantom,
    RasterImage, SensorSet,
};

pub const DATASET_MAGIC: &[u8; 4] = b"EQMD";
pub const DATASET_VERSION: u32 = 1;

/// Ranges of the ring generator. Every range is sampled uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingParams {
    pub outer_axes: (f64, f64),
    /// Each inner semi-axis is this fraction of the matching outer one.
    pub inner_fraction: (f64, f64),
    /// Half-width of the box the shared center is drawn from.
    pub jitter: f64,
    pub max_tries: usize,
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams {
            outer_axes: (0.5, 1.0),
            inner_fraction: (0.35, 0.8),
            jitter: 0.15,
            max_tries: 1000,
        }
    }
}

impl RingParams {
    /// Radius of a disc that holds every ring the generator can emit.
    pub fn support_radius(&self) -> f64 {
        self.outer_axes.1 + self.jitter * std::f64::consts::SQRT_2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingSample {
    pub outer: Ellipse,
    pub inner: Ellipse,
    pub d_min: f64,
    pub d_max: f64,
}

impl RingSample {
    pub fn phantom(&self) -> Phantom {
        Phantom::ring(self.outer, self.inner)
    }
}

/// Distance from the center to the boundary of a centered ellipse along
/// direction `t`.
fn boundary_distance(e: &Ellipse, t: f64) -> f64 {
    let (s, c) = (t - e.psi).sin_cos();
    (c * c / (e.a * e.a) + s * s / (e.b * e.b)).sqrt().recip()
}

/// True when every one of 720 boundary samples of `inner` lies strictly
/// inside `outer`. Sampling can miss a crossing between samples, so
/// generated rings are also checked with a margin by the thickness itself.
pub fn containment(inner: &Ellipse, outer: &Ellipse) -> bool {
    let m = outer.shape_matrix();
    (0..720).all(|i| {
        let t = TAU * i as f64 / 720.0;
        let (s, c) = t.sin_cos();
        let local = Vec2::new(inner.a * c, inner.b * s);
        let (ps, pc) = inner.psi.sin_cos();
        let u = inner.center + Vec2::new(pc * local.x - ps * local.y, ps * local.x + pc * local.y);
        let d = u - outer.center;
        d.dot(&(m * d)) < 1.0
    })
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// `(d_min, d_max)` of a ring: wall thickness `ρ_outer(t) − ρ_inner(t)` along
/// rays from the shared center, minimised and maximised over 3600 directions
/// and refined by golden-section search.
pub fn thickness(p: &Phantom) -> Result<(f64, f64)> {
    let [outer, inner] = p.components() else {
        return usage("thickness needs a ring phantom with two ellipses");
    };
    if !(outer.density > 0.0 && inner.density < 0.0) || (outer.center - inner.center).norm() > 1e-12
    {
        return usage(
            "thickness needs a positive outer and negative inner ellipse with a shared center",
        );
    }
    let d = |t: f64| boundary_distance(outer, t) - boundary_distance(inner, t);
    let n = 3600;
    let step = TAU / n as f64;
    let vals: Vec<f64> = (0..n).map(|i| d(i as f64 * step)).collect();
    let (mut imin, mut imax) = (0, 0);
    for (i, v) in vals.iter().enumerate() {
        if *v < vals[imin] {
            imin = i;
        }
        if *v > vals[imax] {
            imax = i;
        }
    }
    let tol = 1e-10;
    let t0 = imin as f64 * step;
    let tmin = golden_section(d, t0 - step, t0 + step, tol);
    let t1 = imax as f64 * step;
    let tmax = golden_section(|t| -d(t), t1 - step, t1 + step, tol);
    let lo = d(tmin).min(vals[imin]);
    let hi = d(tmax).max(vals[imax]);
    if !(lo > 0.0) {
        return usage("inner ellipse is not contained in the outer one");
    }
    Ok((lo, hi))
}

/// One random ring; inner axes are redrawn until the inner ellipse fits.
pub fn gen_ring<R: rand::Rng + ?Sized>(rng: &mut R, params: &RingParams) -> Result<RingSample> {
    let j = params.jitter;
    let center = Vec2::new(uniform(rng, (-j, j)), uniform(rng, (-j, j)));
    let outer = Ellipse::new(
        center,
        uniform(rng, params.outer_axes),
        uniform(rng, params.outer_axes),
        uniform(rng, (0.0, TAU)),
        1.0,
    )?;
    for _ in 0..params.max_tries {
        let inner = Ellipse::new(
            center,
            outer.a * uniform(rng, params.inner_fraction),
            outer.b * uniform(rng, params.inner_fraction),
            uniform(rng, (0.0, TAU)),
            -1.0,
        )?;
        if containment(&inner, &outer) {
            if let Ok((d_min, d_max)) = thickness(&Phantom::ring(outer, inner)) {
                return Ok(RingSample {
                    outer,
                    inner,
                    d_min,
                    d_max,
                });
            }
        }
    }
    Err(Error::Generation(format!(
        "no contained inner ellipse after {} tries",
        params.max_tries
    )))
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub geometry: Geometry,
    pub noise: f64,
    pub seed: u64,
    pub rings: RingParams,
    pub n_sensors: usize,
    pub n_records: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub sensors: SensorSet,
    pub records: Vec<Record>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub ring: RingSample,
    pub y: Vec<f64>,
}

/// Default acquisition: fan beam at 0° and 85°.
pub fn default_geometry() -> Geometry {
    Geometry::fan_covering(vec![0.0, 85f64.to_radians()], 64, 1.3, 4.0)
        .expect("valid default geometry")
}

/// Generator for sample `index` of the stream started by `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn build_dataset(
    n: usize,
    geom: &Geometry,
    noise: f64,
    rings: &RingParams,
    seed: u64,
) -> Result<DatasetFile> {
    geom.validate()?;
    let sensors = build_sensors(geom);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let ring = gen_ring(&mut rng, rings)?;
        let clean = measure(&ring.phantom(), &sensors);
        let y = add_noise(&clean, noise, &mut rng)?;
        records.push(Record { ring, y });
    }
    Ok(DatasetFile {
        header: DatasetHeader {
            version: DATASET_VERSION,
            geometry: geom.clone(),
            noise,
            seed,
            rings: rings.clone(),
            n_sensors: sensors.len(),
            n_records: n,
        },
        sensors,
        records,
    })
}

impl DatasetFile {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rebuilds the records from the header alone.
    pub fn regenerate(header: &DatasetHeader) -> Result<DatasetFile> {
        build_dataset(
            header.n_records,
            &header.geometry,
            header.noise,
            &header.rings,
            header.seed,
        )
    }

    /// Measurements of the given records as `[len, n_sensors]`.
    pub fn inputs(&self, rows: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.sensors.len());
        for &i in rows {
            data.extend_from_slice(&self.records[i].y);
        }
        Tensor::new(vec![rows.len(), self.sensors.len()], data)
    }

    /// `(d_min, d_max)` pairs of the given records, flat.
    pub fn targets(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| [self.records[i].ring.d_min, self.records[i].ring.d_max])
            .collect()
    }

    /// Per-column mean and population standard deviation of the targets.
    pub fn target_stats(&self) -> ([f64; 2], [f64; 2]) {
        let n = self.len().max(1) as f64;
        let mut mean = [0.0; 2];
        for r in &self.records {
            mean[0] += r.ring.d_min / n;
            mean[1] += r.ring.d_max / n;
        }
        let mut var = [0.0; 2];
        for r in &self.records {
            var[0] += (r.ring.d_min - mean[0]).powi(2) / n;
            var[1] += (r.ring.d_max - mean[1]).powi(2) / n;
        }
        (mean, [var[0].sqrt(), var[1].sqrt()])
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        if self.header.n_records != self.records.len()
            || self.header.n_sensors != self.sensors.len()
        {
            return usage("dataset header counts disagree with its contents");
        }
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(16 * self.sensors.len());
        for v in &self.sensors.points {
            buf.extend_from_slice(&v.r.to_le_bytes());
            buf.extend_from_slice(&v.phi.to_le_bytes());
        }
        w.write_all(&buf)?;
        for r in &self.records {
            buf.clear();
            for e in [&r.ring.outer, &r.ring.inner] {
                for x in [e.center.x, e.center.y, e.a, e.b, e.psi, e.density] {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            buf.extend_from_slice(&r.ring.d_min.to_le_bytes());
            buf.extend_from_slice(&r.ring.d_max.to_le_bytes());
            if r.y.len() != self.sensors.len() {
                return usage("record length differs from the sensor count");
            }
            for x in &r.y {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<DatasetFile> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(format_err)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_n(&mut r)?);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let len = u64::from_le_bytes(read_n(&mut r)?) as usize;
        if len > 1 << 24 {
            return Err(Error::Format("dataset header is implausibly large".into()));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(format_err)?;
        let header: DatasetHeader = serde_json::from_slice(&text)
            .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        if header.version != version {
            return Err(Error::Format(
                "dataset header version disagrees with the file".into(),
            ));
        }
        let mut f = || -> Result<f64> { Ok(f64::from_le_bytes(read_n(&mut r)?)) };
        let mut points = Vec::with_capacity(header.n_sensors);
        for _ in 0..header.n_sensors {
            let (rr, phi) = (f()?, f()?);
            points.push(PointY { r: rr, phi });
        }
        let mut records = Vec::with_capacity(header.n_records);
        for _ in 0..header.n_records {
            let mut e = [[0.0; 6]; 2];
            for row in &mut e {
                for x in row.iter_mut() {
                    *x = f()?;
                }
            }
            let ell = |v: [f64; 6]| Ellipse {
                center: Vec2::new(v[0], v[1]),
                a: v[2],
                b: v[3],
                psi: v[4],
                density: v[5],
            };
            let (d_min, d_max) = (f()?, f()?);
            let y = (0..header.n_sensors)
                .map(|_| f())
                .collect::<Result<Vec<_>>>()?;
            records.push(Record {
                ring: RingSample {
                    outer: ell(e[0]),
                    inner: ell(e[1]),
                    d_min,
                    d_max,
                },
                y,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(DatasetFile {
            header,
            sensors: SensorSet { points },
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetFile> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Usage(format!("cannot open dataset {}: {e}", path.display())))?;
        DatasetFile::read(std::io::BufReader::new(f))
    }

    /// One row per record: index, targets and both ellipses.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "index",
            "d_min",
            "d_max",
            "center_x",
            "center_y",
            "outer_a",
            "outer_b",
            "outer_psi",
            "inner_a",
            "inner_b",
            "inner_psi",
        ])
        .map_err(csv_err)?;
        for (i, r) in self.records.iter().enumerate() {
            let (o, n) = (&r.ring.outer, &r.ring.inner);
            let mut row = vec![i.to_string()];
            row.extend(
                [
                    r.ring.d_min,
                    r.ring.d_max,
                    o.center.x,
                    o.center.y,
                    o.a,
                    o.b,
                    o.psi,
                    n.a,
                    n.b,
                    n.psi,
                ]
                .iter()
                .map(|x| x.to_string()),
            );
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Count, mean, standard deviation, minimum and maximum of each target.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["target", "count", "mean", "std", "min", "max"])
            .map_err(csv_err)?;
        let (mean, std) = self.target_stats();
        for (k, name) in ["d_min", "d_max"].iter().enumerate() {
            let vals = self
                .records
                .iter()
                .map(|r| if k == 0 { r.ring.d_min } else { r.ring.d_max });
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            out.write_record([
                name.to_string(),
                self.len().to_string(),
                mean[k].to_string(),
                std[k].to_string(),
                lo.to_string(),
                hi.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn format_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file ends early".into())
    } else {
        Error::Io(e)
    }
}

fn read_n<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(format_err)?;
    Ok(b)
}

/// Dataset sizes of the thickness study.
pub const STUDY_SIZES: [usize; 4] = [1000, 2000, 4000, 8000];

fn idx_header<R: Read>(r: &mut R, ndims: u8) -> Result<Vec<usize>> {
    let magic: [u8; 4] = read_n(r)?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != 0x08 {
        return Err(Error::Format("IDX: expected unsigned-byte data".into()));
    }
    if magic[3] != ndims {
        return Err(Error::Format(format!(
            "IDX: expected {ndims} dimensions, found {}",
            magic[3]
        )));
    }
    (0..ndims)
        .map(|_| Ok(u32::from_be_bytes(read_n(r)?) as usize))
        .collect()
}

/// Images of an IDX file as rasters with values in `[0, 1]`, spanning
/// `[−1, 1]` horizontally.
pub fn read_idx_images<R: Read>(mut r: R) -> Result<Vec<RasterImage>> {
    let dims = idx_header(&mut r, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if h == 0 || w == 0 {
        return Err(Error::Format("IDX: empty images".into()));
    }
    let layout = GridLayout::new(w, h, 2.0 / w as f64)?;
    let mut buf = vec![0u8; h * w];
    (0..n)
        .map(|_| {
            r.read_exact(&mut buf).map_err(format_err)?;
            RasterImage::new(layout, buf.iter().map(|&b| b as f64 / 255.0).collect())
        })
        .collect()
}

pub fn read_idx_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let n = idx_header(&mut r, 1)?[0];
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(format_err)?;
    Ok(buf)
}

pub fn load_idx(path: &Path) -> Result<Vec<RasterImage>> {
    read_idx_images(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    read_idx_labels(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Raw IDX bytes for unsigned-byte images, the inverse of [`read_idx_images`].
pub fn encode_idx_images(images: &[Vec<u8>], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 3];
    for d in [images.len(), h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for im in images {
        out.extend_from_slice(im);
    }
    out
}
