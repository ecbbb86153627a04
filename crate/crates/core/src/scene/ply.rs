//! PLY point-cloud I/O, covering exactly what seed clouds need: vertex
//! elements with `x, y, z` coordinates and `red, green, blue` colors, in
//! ascii or little-endian binary format. Extra properties are tolerated and
//! skipped; missing required ones are an error naming the property.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        source: std::io::Error,
    },
    #[error("{file}: {msg}")]
    Malformed { file: String, msg: String },
}

/// One seed point: position in world units, color in linear [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    F32,
    F64,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
}

impl PropType {
    fn parse(s: &str) -> Option<PropType> {
        Some(match s {
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            "uchar" | "uint8" => PropType::U8,
            "char" | "int8" => PropType::I8,
            "ushort" | "uint16" => PropType::U16,
            "short" | "int16" => PropType::I16,
            "uint" | "uint32" => PropType::U32,
            "int" | "int32" => PropType::I32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::U8 | PropType::I8 => 1,
            PropType::U16 | PropType::I16 => 2,
            PropType::F32 | PropType::U32 | PropType::I32 => 4,
            PropType::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            PropType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            PropType::U8 => bytes[0] as f64,
            PropType::I8 => bytes[0] as i8 as f64,
            PropType::U16 => u16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PropType::I16 => i16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PropType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        }
    }

    /// Colors stored as integers are in 0..=255; floats are already [0,1].
    fn color_scale(self) -> f64 {
        match self {
            PropType::F32 | PropType::F64 => 1.0,
            _ => 1.0 / 255.0,
        }
    }
}

pub fn read_ply(path: &Path) -> Result<Vec<PlyPoint>, PlyError> {
    let file_name = path.display().to_string();
    let io_err = |source| PlyError::Io {
        file: file_name.clone(),
        source,
    };
    let bad = |msg: String| PlyError::Malformed {
        file: file_name.clone(),
        msg,
    };

    let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(io_err)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing 'ply' magic line".into()));
    }

    let mut binary = None;
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<(String, PropType)> = Vec::new();
    let mut in_vertex_element = false;
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(io_err)? == 0 {
            return Err(bad("unexpected end of header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] => {}
            ["format", "ascii", "1.0"] => binary = Some(false),
            ["format", "binary_little_endian", "1.0"] => binary = Some(true),
            ["format", other, ..] => {
                return Err(bad(format!("unsupported format '{other}'")));
            }
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse()
                        .map_err(|_| bad(format!("bad vertex count '{n}'")))?,
                );
                in_vertex_element = true;
            }
            ["element", name, _] => {
                // Other elements (faces, edges) are not meaningful for seed
                // clouds; reject rather than misparse the payload.
                return Err(bad(format!("unsupported element '{name}'")));
            }
            ["property", ty, name] if in_vertex_element => {
                let ty = PropType::parse(ty)
                    .ok_or_else(|| bad(format!("unsupported property type '{ty}' for '{name}'")))?;
                props.push((name.to_string(), ty));
            }
            ["property", "list", ..] => {
                return Err(bad("list properties are not supported".into()));
            }
            _ => return Err(bad(format!("unrecognized header line '{}'", line.trim_end()))),
        }
    }

    let binary = binary.ok_or_else(|| bad("missing format line".into()))?;
    let count = vertex_count.ok_or_else(|| bad("missing 'element vertex' line".into()))?;
    let find = |name: &str| -> Result<usize, PlyError> {
        props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| bad(format!("missing property '{name}'")))
    };
    let idx = [
        find("x")?,
        find("y")?,
        find("z")?,
        find("red")?,
        find("green")?,
        find("blue")?,
    ];

    let mut points = Vec::with_capacity(count);
    if binary {
        let row_size: usize = props.iter().map(|(_, t)| t.size()).sum();
        let offsets: Vec<usize> = props
            .iter()
            .scan(0usize, |acc, (_, t)| {
                let off = *acc;
                *acc += t.size();
                Some(off)
            })
            .collect();
        let mut row = vec![0u8; row_size];
        for v in 0..count {
            reader
                .read_exact(&mut row)
                .map_err(|_| bad(format!("truncated binary payload at vertex {v}")))?;
            let get = |slot: usize| {
                let (_, ty) = props[idx[slot]];
                ty.read_le(&row[offsets[idx[slot]]..])
            };
            let cscale = |slot: usize| props[idx[slot]].1.color_scale();
            points.push(PlyPoint {
                position: [get(0), get(1), get(2)],
                color: [
                    get(3) * cscale(3),
                    get(4) * cscale(4),
                    get(5) * cscale(5),
                ],
            });
        }
    } else {
        for v in 0..count {
            line.clear();
            if reader.read_line(&mut line).map_err(io_err)? == 0 {
                return Err(bad(format!("truncated ascii payload at vertex {v}")));
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != props.len() {
                return Err(bad(format!(
                    "vertex {v}: expected {} fields, got {}",
                    props.len(),
                    fields.len()
                )));
            }
            let get = |slot: usize| -> Result<f64, PlyError> {
                let raw = fields[idx[slot]];
                raw.parse()
                    .map_err(|_| bad(format!("vertex {v}: bad value '{raw}'")))
            };
            points.push(PlyPoint {
                position: [get(0)?, get(1)?, get(2)?],
                color: [
                    get(3)? * props[idx[3]].1.color_scale(),
                    get(4)? * props[idx[4]].1.color_scale(),
                    get(5)? * props[idx[5]].1.color_scale(),
                ],
            });
        }
    }
    Ok(points)
}

/// Write a binary little-endian PLY with float positions and uchar colors.
pub fn write_ply(path: &Path, points: &[PlyPoint]) -> Result<(), PlyError> {
    let file_name = path.display().to_string();
    let io_err = |source| PlyError::Io {
        file: file_name.clone(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for p in points {
        for c in p.position {
            w.write_all(&(c as f32).to_le_bytes()).map_err(io_err)?;
        }
        for c in p.color {
            let byte = (c.clamp(0.0, 1.0) * 255.0).round() as u8;
            w.write_all(&[byte]).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip_preserves_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let points = vec![
            PlyPoint {
                position: [0.25, -1.5, 3.0],
                color: [1.0, 0.0, 0.5019607843137255],
            },
            PlyPoint {
                position: [7.0, 8.0, -9.0],
                color: [0.0, 1.0, 0.25098039215686274],
            },
        ];
        write_ply(&path, &points).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&points) {
            for k in 0..3 {
                assert!((a.position[k] - b.position[k]).abs() < 1e-6);
                // Colors quantize to u8 on write.
                assert!((a.color[k] - b.color[k]).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn ascii_format_parses_with_extra_property() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment test cloud\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             property float confidence\nend_header\n\
             1.0 2.0 3.0 255 0 127 0.9\n-1 -2 -3 0 255 0 0.1\n",
        )
        .unwrap();
        let points = read_ply(&path).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].position, [1.0, 2.0, 3.0]);
        assert!((points[0].color[0] - 1.0).abs() < 1e-9);
        assert!((points[0].color[2] - 127.0 / 255.0).abs() < 1e-9);
        assert_eq!(points[1].position, [-1.0, -2.0, -3.0]);
    }

    #[test]
    fn missing_color_property_is_an_error_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nend_header\n1 2 3 4 5\n",
        )
        .unwrap();
        let err = read_ply(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blue") && msg.contains("b.ply"), "got: {msg}");
    }

    #[test]
    fn truncated_binary_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
            .to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = read_ply(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
