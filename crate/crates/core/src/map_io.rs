//! Binary map files and occupied-voxel export.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MRFM" | version u32 | map type u8 | origin 3×f64 | voxel side f64
//! | brick size u32 | dims 3×u32 | unobserved p f64 | brick count u32
//! | per brick, ascending (z, y, x): coords 3×u32, B³ × f32 p_occ
//! ```
//!
//! Voxels inside a brick are ordered x fastest. `NaN` marks an unobserved voxel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::baseline_logodds::{sigmoid, LogOddsMap};
use crate::geometry::{GridGeometry, VoxelIndex};
use crate::sparse_grid::{BrickTopology, GridConfig, GridError, OccupancyField, OccupiedVoxel, SparseGrid};

pub const MAGIC: &[u8; 4] = b"MRFM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("not a map file (bad magic)")]
    BadMagic,
    #[error("unsupported map format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown map type tag {0}")]
    UnknownMapType(u8),
    #[error("corrupt map file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapType {
    Mrf = 0,
    LogOdds = 1,
}

impl MapType {
    fn from_tag(t: u8) -> Result<Self, MapIoError> {
        match t {
            0 => Ok(Self::Mrf),
            1 => Ok(Self::LogOdds),
            t => Err(MapIoError::UnknownMapType(t)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mrf => "mrf",
            Self::LogOdds => "logodds",
        }
    }
}

/// Read-only occupancy map, the common form every map is stored and evaluated in.
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    map_type: MapType,
    config: GridConfig,
    geometry: GridGeometry,
    topology: BrickTopology,
    p: Vec<f32>,
    unobserved_p: f64,
}

impl ProbabilityMap {
    pub fn empty(map_type: MapType, config: GridConfig, unobserved_p: f64) -> Result<Self, GridError> {
        config.validate()?;
        Ok(Self {
            map_type,
            config,
            geometry: config.geometry(),
            topology: BrickTopology::new(&config),
            p: Vec::new(),
            unobserved_p,
        })
    }

    fn from_slots(
        map_type: MapType,
        config: GridConfig,
        unobserved_p: f64,
        src: &BrickTopology,
        p_of: impl Fn(usize) -> f32,
    ) -> Self {
        let mut map = Self::empty(map_type, config, unobserved_p).expect("validated by source");
        let vpb = src.voxels_per_brick();
        for (b, pool) in src.bricks_sorted() {
            map.topology.allocate(b).expect("same config");
            map.p.extend((pool * vpb..(pool + 1) * vpb).map(&p_of));
        }
        map
    }

    /// Voxels no ray crossed are stored as unobserved.
    pub fn from_mrf(grid: &SparseGrid) -> Self {
        Self::from_slots(MapType::Mrf, *grid.config(), grid.prior(), grid.topology(), |s| {
            if grid.observed_slot(s) {
                grid.belief_of_slot(s).p_occ as f32
            } else {
                f32::NAN
            }
        })
    }

    pub fn from_logodds(map: &LogOddsMap) -> Self {
        Self::from_slots(MapType::LogOdds, *map.config(), 0.5, map.topology(), |s| {
            sigmoid(map.log_odds_of_slot(s)) as f32
        })
    }

    pub fn map_type(&self) -> MapType {
        self.map_type
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn unobserved_p(&self) -> f64 {
        self.unobserved_p
    }

    pub fn allocated_bricks(&self) -> usize {
        self.topology.brick_count()
    }

    /// Stores a probability, allocating the brick; `NaN` leaves the voxel unobserved.
    pub fn set(&mut self, voxel: VoxelIndex, p: f32) -> Result<(), GridError> {
        let b = self.config.brick_size;
        if !self.topology.voxel_in_bounds(voxel) {
            return Err(GridError::OutOfBounds(voxel.0));
        }
        if self.topology.allocate([voxel.0[0] / b, voxel.0[1] / b, voxel.0[2] / b])?.is_some() {
            self.p.resize(self.topology.slot_count(), f32::NAN);
        }
        let s = self.topology.slot_of(voxel).expect("just allocated");
        self.p[s] = p;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.map_type as u8])?;
        for o in c.origin {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&c.voxel_side.to_le_bytes())?;
        w.write_all(&c.brick_size.to_le_bytes())?;
        for d in c.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.unobserved_p.to_le_bytes())?;
        let bricks = self.topology.bricks_sorted();
        w.write_all(&(bricks.len() as u32).to_le_bytes())?;
        let vpb = self.topology.voxels_per_brick();
        let mut buf = Vec::with_capacity(12 + 4 * vpb);
        for (b, pool) in bricks {
            buf.clear();
            for x in b {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for p in &self.p[pool * vpb..(pool + 1) * vpb] {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, MapIoError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MapIoError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(MapIoError::UnsupportedVersion(version));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let map_type = MapType::from_tag(tag[0])?;
        let origin = [read_f64(r)?, read_f64(r)?, read_f64(r)?];
        let voxel_side = read_f64(r)?;
        let brick_size = read_u32(r)?;
        let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
        let config = GridConfig::new(origin, voxel_side, brick_size, dims)?;
        let unobserved_p = read_f64(r)?;
        let mut map = Self::empty(map_type, config, unobserved_p)?;
        let count = read_u32(r)? as usize;
        let total_bricks: usize = config.brick_dims().iter().map(|&d| d as usize).product();
        if count > total_bricks {
            return Err(MapIoError::Corrupt(format!("{count} bricks in a grid of {total_bricks}")));
        }
        let vpb = map.topology.voxels_per_brick();
        let mut raw = vec![0u8; 4 * vpb];
        map.p.reserve(count * vpb);
        for _ in 0..count {
            let b = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
            if !map.topology.brick_in_bounds(b) {
                return Err(MapIoError::Corrupt(format!("brick {b:?} outside grid")));
            }
            if map.topology.allocate(b)?.is_none() {
                return Err(MapIoError::Corrupt(format!("brick {b:?} listed twice")));
            }
            r.read_exact(&mut raw)?;
            map.p.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(MapIoError::Corrupt("trailing bytes".into()));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapIoError> {
        let io = |source| MapIoError::Io { path: path.display().to_string(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, MapIoError> {
        let f = File::open(path).map_err(|source| MapIoError::Io { path: path.display().to_string(), source })?;
        Self::read_from(&mut BufReader::new(f))
    }

    /// Observed voxels with `p >= threshold`, sorted by `(z, y, x)`.
    pub fn occupied(&self, threshold: f64) -> Vec<OccupiedVoxel> {
        let mut out: Vec<OccupiedVoxel> = self
            .p
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_nan() && **p as f64 >= threshold)
            .map(|(s, &p)| {
                let voxel = self.topology.voxel_of_slot(s);
                let c = self.geometry.voxel_center(voxel);
                OccupiedVoxel { voxel, center: [c.x, c.y, c.z], p_occ: p as f64 }
            })
            .collect();
        out.sort_by_key(|o| [o.voxel.0[2], o.voxel.0[1], o.voxel.0[0]]);
        out
    }
}

impl OccupancyField for ProbabilityMap {
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn occupancy(&self, voxel: VoxelIndex) -> Option<f64> {
        self.topology.slot_of(voxel).map(|s| self.p[s]).filter(|p| !p.is_nan()).map(f64::from)
    }

    fn unknown_probability(&self) -> f64 {
        self.unobserved_p
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_occupied_csv(path: &Path, voxels: &[OccupiedVoxel]) -> Result<(), MapIoError> {
    let io = |source| MapIoError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "x,y,z,p").map_err(io)?;
    for v in voxels {
        writeln!(w, "{},{},{},{}", v.center[0], v.center[1], v.center[2], v.p_occ).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// ASCII PLY point cloud with a per-vertex `p` property.
pub fn write_occupied_ply(path: &Path, voxels: &[OccupiedVoxel]) -> Result<(), MapIoError> {
    let io = |source| MapIoError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float p\nend_header\n",
        voxels.len()
    )
    .map_err(io)?;
    for v in voxels {
        writeln!(w, "{} {} {} {}", v.center[0], v.center[1], v.center[2], v.p_occ).map_err(io)?;
    }
    w.flush().map_err(io)
}
