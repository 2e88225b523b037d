//! PLY point-cloud reading and writing (ascii and binary little-endian).
//!
//! Vertices carry `x y z`, optionally `nx ny nz` and `label`. Readers accept
//! any scalar property type; writers emit `float` coordinates and a `ushort`
//! label.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{LodeError, Result};
use crate::grid::{PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read_le<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::I8 => r.read_i8()? as f64,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I16 => r.read_i16::<LittleEndian>()? as f64,
            Scalar::U16 => r.read_u16::<LittleEndian>()? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
            Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> LodeError {
    LodeError::Format { path: path.to_path_buf(), msg: msg.into() }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    read_ply_from(&mut reader, path)
}

fn read_ply_from<R: BufRead>(reader: &mut R, path: &Path) -> Result<PointCloud> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(format_err(path, "missing ply magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(format_err(path, "unterminated header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(format_err(path, format!("unsupported format {other}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format_err(path, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                // list properties only occur on faces, which we do not read
                if let Some(e) = elements.last_mut() {
                    if e.name == "vertex" {
                        return Err(format_err(path, "list property on vertex element"));
                    }
                }
            }
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| format_err(path, format!("unknown type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| format_err(path, "property before element"))?
                    .props
                    .push((name.to_string(), s));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(format_err(path, format!("unexpected header line: {}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| format_err(path, "missing format line"))?;
    let vertex = match elements.first() {
        Some(e) if e.name == "vertex" => e,
        _ => return Err(format_err(path, "first element must be vertex")),
    };
    let col = |name: &str| vertex.props.iter().position(|(n, _)| n == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(format_err(path, "vertex lacks x/y/z")),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let label_col = col("label");

    let mut row = vec![0.0f64; vertex.props.len()];
    let mut cloud = PointCloud {
        points: Vec::with_capacity(vertex.count),
        normals: normal_cols.map(|_| Vec::with_capacity(vertex.count)),
        labels: label_col.map(|_| Vec::with_capacity(vertex.count)),
    };
    for _ in 0..vertex.count {
        match format {
            PlyFormat::Ascii => {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    return Err(LodeError::Truncated(format!("{}: vertex data", path.display())));
                }
                let mut it = line.split_whitespace();
                for v in row.iter_mut() {
                    *v = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| format_err(path, "bad ascii vertex row"))?;
                }
            }
            PlyFormat::BinaryLittleEndian => {
                for (v, (_, s)) in row.iter_mut().zip(&vertex.props) {
                    *v = s
                        .read_le(reader)
                        .map_err(|_| LodeError::Truncated(format!("{}: vertex data", path.display())))?;
                }
            }
        }
        cloud.points.push(Vec3::new(row[ix], row[iy], row[iz]));
        if let (Some((a, b, c)), Some(n)) = (normal_cols, cloud.normals.as_mut()) {
            n.push(Vec3::new(row[a], row[b], row[c]));
        }
        if let (Some(l), Some(labels)) = (label_col, cloud.labels.as_mut()) {
            labels.push(row[l] as u16);
        }
    }
    Ok(cloud)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ply_to(&mut w, cloud, format)?;
    w.flush()?;
    Ok(())
}

pub fn write_ply_to<W: Write>(w: &mut W, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    cloud.validate_lengths()?;
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if cloud.normals.is_some() {
        writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
    }
    if cloud.labels.is_some() {
        writeln!(w, "property ushort label")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        let mut floats: Vec<f32> = vec![p[0] as f32, p[1] as f32, p[2] as f32];
        if let Some(n) = &cloud.normals {
            floats.extend([n[i][0] as f32, n[i][1] as f32, n[i][2] as f32]);
        }
        let label = cloud.labels.as_ref().map(|l| l[i]);
        match format {
            PlyFormat::Ascii => {
                let mut s: Vec<String> = floats.iter().map(|f| f.to_string()).collect();
                if let Some(l) = label {
                    s.push(l.to_string());
                }
                writeln!(w, "{}", s.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for f in floats {
                    w.write_f32::<LittleEndian>(f)?;
                }
                if let Some(l) = label {
                    w.write_u16::<LittleEndian>(l)?;
                }
            }
        }
    }
    Ok(())
}

impl PointCloud {
    fn validate_lengths(&self) -> Result<()> {
        let n = self.points.len();
        if let Some(v) = &self.normals {
            if v.len() != n {
                return Err(LodeError::LengthMismatch { expected: n, got: v.len() });
            }
        }
        if let Some(v) = &self.labels {
            if v.len() != n {
                return Err(LodeError::LengthMismatch { expected: n, got: v.len() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_cloud() -> PointCloud {
        PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 10.0)])
            .with_normals(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)])
            .unwrap()
            .with_labels(vec![3, 7])
            .unwrap()
    }

    #[test]
    fn ascii_and_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let path = dir.path().join(format!("{fmt:?}.ply"));
            write_ply(&path, &sample_cloud(), fmt).unwrap();
            let back = read_ply(&path).unwrap();
            assert_eq!(back, sample_cloud());
        }
    }

    #[test]
    fn reads_double_properties_and_skips_faces() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0.5 1.5 2.5\n1 1 1\n3 0 1 1\n";
        let cloud = read_ply_from(&mut text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(cloud.points, vec![Vec3::new(0.5, 1.5, 2.5), Vec3::new(1.0, 1.0, 1.0)]);
        assert!(cloud.normals.is_none() && cloud.labels.is_none());
    }

    #[test]
    fn truncated_binary_is_an_error() {
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &sample_cloud(), PlyFormat::BinaryLittleEndian).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_ply_from(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, LodeError::Truncated(_)));
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_exact_for_f32_values(
            pts in prop::collection::vec((-1e4f32..1e4, -1e4f32..1e4, -1e4f32..1e4), 0..40)
        ) {
            let cloud = PointCloud::new(pts.iter().map(|&(a, b, c)| Vec3::new(a as f64, b as f64, c as f64)).collect());
            let mut buf = Vec::new();
            write_ply_to(&mut buf, &cloud, PlyFormat::BinaryLittleEndian).unwrap();
            let back = read_ply_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, cloud);
        }
    }
}
