//! OBJ and PLY mesh file I/O.
//!
//! PLY is the lossless interchange format (binary little-endian stores
//! coordinates as doubles, so save/load round-trips bitwise); OBJ is kept for
//! compatibility. A per-vertex scalar field can be written as vertex colors
//! using a symmetric blue-white-red colormap.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::mesh::{face_cross, Mesh};

/// Relative area threshold below which a face is rejected as degenerate.
const DEGENERATE_AREA_FACTOR: f64 = 1e-12;

/// Load a mesh from OBJ or PLY, deciding by file extension (falling back to
/// content sniffing). Polygon faces are fan-triangulated; vertex order is
/// preserved. Degenerate faces are rejected.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let mesh = match ext.as_deref() {
        Some("obj") => load_obj(path)?,
        Some("ply") => load_ply(path)?,
        _ => {
            let mut head = [0u8; 3];
            File::open(path)?.read_exact(&mut head).ok();
            if &head == b"ply" {
                load_ply(path)?
            } else {
                load_obj(path)?
            }
        }
    };
    reject_degenerate_faces(path, &mesh)?;
    Ok(mesh)
}

fn reject_degenerate_faces(path: &Path, mesh: &Mesh) -> Result<()> {
    let diag = mesh.bbox_diagonal();
    let threshold = DEGENERATE_AREA_FACTOR * diag * diag;
    for (fi, f) in mesh.faces().iter().enumerate() {
        let area = 0.5 * face_cross(mesh.positions(), f).norm();
        if area < threshold {
            return Err(Error::DegenerateFace {
                face: fi,
                message: format!(
                    "{}: face area {area:.3e} is below {threshold:.3e}; remove or weld degenerate faces before inpainting",
                    path.display()
                ),
            });
        }
    }
    Ok(())
}

/// Save a mesh, deciding the format by extension (`.obj` or `.ply`; PLY is
/// written binary little-endian). `scalar_field`, when given, is emitted as
/// per-vertex colors (PLY only) through [`signed_colormap`].
pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>, scalar_field: Option<&[f64]>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("obj") => save_obj(mesh, path),
        _ => save_ply(mesh, path, scalar_field, true),
    }
}

/// Symmetric blue-white-red colormap for a signed value with range
/// [-max_abs, max_abs]. Zero maps to white.
pub fn signed_colormap(value: f64, max_abs: f64) -> [u8; 3] {
    let t = if max_abs > 0.0 {
        (value / max_abs).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let scale = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    if t <= 0.0 {
        // white -> blue
        [scale(1.0 + t), scale(1.0 + t), 255]
    } else {
        // white -> red
        [255, scale(1.0 - t), scale(1.0 - t)]
    }
}

// ---------------------------------------------------------------- OBJ

fn load_obj(path: &Path) -> Result<Mesh> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let path_str = path.display().to_string();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    let tok = tokens.next().ok_or_else(|| Error::Format {
                        path: path_str.clone(),
                        line: lineno,
                        message: "vertex line has fewer than 3 coordinates".into(),
                    })?;
                    *c = tok.parse().map_err(|_| Error::Format {
                        path: path_str.clone(),
                        line: lineno,
                        message: format!("bad coordinate {tok:?}"),
                    })?;
                }
                positions.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut indices = Vec::new();
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or(tok);
                    let idx: i64 = first.parse().map_err(|_| Error::Format {
                        path: path_str.clone(),
                        line: lineno,
                        message: format!("bad face index {tok:?}"),
                    })?;
                    let resolved = if idx > 0 {
                        (idx - 1) as usize
                    } else if idx < 0 {
                        let n = positions.len() as i64 + idx;
                        if n < 0 {
                            return Err(Error::Format {
                                path: path_str.clone(),
                                line: lineno,
                                message: format!("relative index {idx} out of range"),
                            });
                        }
                        n as usize
                    } else {
                        return Err(Error::Format {
                            path: path_str.clone(),
                            line: lineno,
                            message: "face index 0 is invalid in OBJ".into(),
                        });
                    };
                    indices.push(resolved);
                }
                if indices.len() < 3 {
                    return Err(Error::Format {
                        path: path_str.clone(),
                        line: lineno,
                        message: format!("face with {} vertices cannot be triangulated", indices.len()),
                    });
                }
                for k in 1..indices.len() - 1 {
                    faces.push([indices[0], indices[k], indices[k + 1]]);
                }
            }
            _ => {} // comments, normals, texcoords, groups
        }
    }
    Mesh::new(positions, faces)
}

fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in mesh.positions() {
        writeln!(w, "v {} {} {}", p.x, p.y, p.z)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(tok: &str) -> Option<Self> {
        Some(match tok {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn read_f64(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            PlyType::I8 => r.read_i8()? as f64,
            PlyType::U8 => r.read_u8()? as f64,
            PlyType::I16 => r.read_i16::<LittleEndian>()? as f64,
            PlyType::U16 => r.read_u16::<LittleEndian>()? as f64,
            PlyType::I32 => r.read_i32::<LittleEndian>()? as f64,
            PlyType::U32 => r.read_u32::<LittleEndian>()? as f64,
            PlyType::F32 => r.read_f32::<LittleEndian>()? as f64,
            PlyType::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar { name: String, ty: PlyType },
    List { name: String, count_ty: PlyType, item_ty: PlyType },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

fn ply_line(reader: &mut impl BufRead, lineno: &mut usize, path: &str) -> Result<String> {
    let mut s = String::new();
    if reader.read_line(&mut s)? == 0 {
        return Err(Error::Format {
            path: path.to_string(),
            line: *lineno,
            message: "unexpected end of file".into(),
        });
    }
    *lineno += 1;
    Ok(s.trim_end().to_string())
}

fn ascii_value<'a>(toks: &mut impl Iterator<Item = &'a str>, path: &str, line: usize) -> Result<f64> {
    toks.next()
        .and_then(|t| t.parse::<f64>().ok())
        .ok_or_else(|| Error::Format {
            path: path.to_string(),
            line,
            message: "missing or invalid value".into(),
        })
}

fn load_ply(path: &Path) -> Result<Mesh> {
    let mut reader = BufReader::new(File::open(path)?);
    read_ply_from(&mut reader, &path.display().to_string())
}

/// Parse a PLY stream. `source` is used in error messages only.
pub fn read_ply_from<R: BufRead>(reader: &mut R, source: &str) -> Result<Mesh> {
    let mut reader = reader;
    let path_str = source.to_string();
    let format_err = |line: usize, message: String| Error::Format {
        path: path_str.clone(),
        line,
        message,
    };

    // --- header
    let mut lineno = 0usize;
    if ply_line(&mut reader, &mut lineno, &path_str)?.trim() != "ply" {
        return Err(format_err(1, "missing 'ply' magic".into()));
    }
    let mut binary = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let line = ply_line(&mut reader, &mut lineno, &path_str)?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => match toks.next() {
                Some("ascii") => binary = false,
                Some("binary_little_endian") => binary = true,
                other => {
                    return Err(format_err(
                        lineno,
                        format!("unsupported format {other:?} (ascii and binary_little_endian are supported)"),
                    ))
                }
            },
            Some("element") => {
                let name = toks.next().unwrap_or_default().to_string();
                let count: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| format_err(lineno, "bad element count".into()))?;
                elements.push(PlyElement {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| format_err(lineno, "property before element".into()))?;
                let first = toks.next().unwrap_or_default();
                if first == "list" {
                    let count_ty = PlyType::parse(toks.next().unwrap_or_default())
                        .ok_or_else(|| format_err(lineno, "bad list count type".into()))?;
                    let item_ty = PlyType::parse(toks.next().unwrap_or_default())
                        .ok_or_else(|| format_err(lineno, "bad list item type".into()))?;
                    let name = toks.next().unwrap_or_default().to_string();
                    element.properties.push(PlyProperty::List { name, count_ty, item_ty });
                } else {
                    let ty = PlyType::parse(first)
                        .ok_or_else(|| format_err(lineno, format!("unknown property type {first:?}")))?;
                    let name = toks.next().unwrap_or_default().to_string();
                    element.properties.push(PlyProperty::Scalar { name, ty });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(format_err(lineno, format!("unknown header keyword {other:?}"))),
        }
    }

    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    for element in &elements {
        let is_vertex = element.name == "vertex";
        let is_face = element.name == "face";
        for i in 0..element.count {
            let mut xyz = [f64::NAN; 3];
            let mut indices: Vec<usize> = Vec::new();
            if binary {
                for prop in &element.properties {
                    match prop {
                        PlyProperty::Scalar { name, ty } => {
                            let v = ty.read_f64(&mut reader).map_err(|e| {
                                format_err(lineno, format!("binary read failed in element {i}: {e}"))
                            })?;
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                        PlyProperty::List { name, count_ty, item_ty } => {
                            let n = count_ty.read_f64(&mut reader).map_err(|e| {
                                format_err(lineno, format!("binary read failed in element {i}: {e}"))
                            })? as usize;
                            for _ in 0..n {
                                let v = item_ty.read_f64(&mut reader).map_err(|e| {
                                    format_err(lineno, format!("binary read failed in element {i}: {e}"))
                                })?;
                                if name.starts_with("vertex_ind") || name.starts_with("vertex_index") {
                                    indices.push(v as usize);
                                }
                            }
                        }
                    }
                }
            } else {
                let line = ply_line(&mut reader, &mut lineno, &path_str)?;
                let mut toks = line.split_whitespace();
                for prop in &element.properties {
                    match prop {
                        PlyProperty::Scalar { name, .. } => {
                            let v = ascii_value(&mut toks, &path_str, lineno)?;
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                        PlyProperty::List { name, .. } => {
                            let n = ascii_value(&mut toks, &path_str, lineno)? as usize;
                            for _ in 0..n {
                                let v = ascii_value(&mut toks, &path_str, lineno)?;
                                if name.starts_with("vertex_ind") {
                                    indices.push(v as usize);
                                }
                            }
                        }
                    }
                }
            }
            if is_vertex {
                if xyz.iter().any(|v| v.is_nan()) {
                    return Err(format_err(lineno, format!("vertex {i} is missing x/y/z")));
                }
                positions.push(Point3::new(xyz[0], xyz[1], xyz[2]));
            } else if is_face {
                if indices.len() < 3 {
                    return Err(format_err(lineno, format!("face {i} has fewer than 3 indices")));
                }
                for k in 1..indices.len() - 1 {
                    faces.push([indices[0], indices[k], indices[k + 1]]);
                }
            }
        }
    }
    Mesh::new(positions, faces)
}

/// Write PLY. Binary little-endian stores coordinates as doubles.
pub fn save_ply(mesh: &Mesh, path: impl AsRef<Path>, scalar_field: Option<&[f64]>, binary: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_ply_to(mesh, &mut w, scalar_field, binary)
}

/// Serialize a mesh as PLY into any writer.
pub fn write_ply_to(mesh: &Mesh, w: &mut impl Write, scalar_field: Option<&[f64]>, binary: bool) -> Result<()> {
    if let Some(field) = scalar_field {
        if field.len() != mesh.vertex_count() {
            return Err(Error::Dimension(format!(
                "scalar field has {} entries for {} vertices",
                field.len(),
                mesh.vertex_count()
            )));
        }
    }
    let colors: Option<Vec<[u8; 3]>> = scalar_field.map(|field| {
        let max_abs = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        field.iter().map(|&v| signed_colormap(v, max_abs)).collect()
    });

    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "element vertex {}", mesh.vertex_count())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if colors.is_some() {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.face_count())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;

    if binary {
        for (i, p) in mesh.positions().iter().enumerate() {
            w.write_f64::<LittleEndian>(p.x)?;
            w.write_f64::<LittleEndian>(p.y)?;
            w.write_f64::<LittleEndian>(p.z)?;
            if let Some(colors) = &colors {
                w.write_all(&colors[i])?;
            }
        }
        for f in mesh.faces() {
            w.write_u8(3)?;
            for &v in f {
                w.write_i32::<LittleEndian>(v as i32)?;
            }
        }
    } else {
        for (i, p) in mesh.positions().iter().enumerate() {
            write!(w, "{} {} {}", p.x, p.y, p.z)?;
            if let Some(colors) = &colors {
                write!(w, " {} {} {}", colors[i][0], colors[i][1], colors[i][2])?;
            }
            writeln!(w)?;
        }
        for f in mesh.faces() {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use std::io::Write as _;

    #[test]
    fn obj_minimal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.face_count(), 1);
        assert_eq!(m.faces()[0], [0, 1, 2]);
    }

    #[test]
    fn obj_quad_fan_triangulates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.obj");
        std::fs::write(
            &path,
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n",
        )
        .unwrap();
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.face_count(), 2);
        assert_eq!(m.faces()[0], [0, 1, 2]);
        assert_eq!(m.faces()[1], [0, 2, 3]);
    }

    #[test]
    fn obj_parse_error_carries_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 zzz\n").unwrap();
        match load_mesh(&path) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn binary_ply_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        let m = fixtures::icosphere(2);
        save_mesh(&m, &path, None).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in m.positions().iter().zip(back.positions()) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
    }

    #[test]
    fn ascii_ply_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        let m = fixtures::uv_sphere(6, 5);
        save_ply(&m, &path, None, false).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in m.positions().iter().zip(back.positions()) {
            // shortest-roundtrip decimal formatting parses back exactly
            assert_eq!(a, b);
        }
    }

    #[test]
    fn obj_roundtrip_preserves_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.obj");
        let m = fixtures::icosphere(1);
        save_mesh(&m, &path, None).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.faces(), m.faces());
    }

    #[test]
    fn colormap_midpoint_and_extremes() {
        assert_eq!(signed_colormap(0.0, 0.0), [255, 255, 255]);
        assert_eq!(signed_colormap(0.0, 1.0), [255, 255, 255]);
        assert_eq!(signed_colormap(1.0, 1.0), [255, 0, 0]);
        assert_eq!(signed_colormap(-1.0, 1.0), [0, 0, 255]);
    }

    #[test]
    fn scalar_field_colors_written_and_zero_field_is_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let m = fixtures::icosphere(1);
        let field = vec![0.0; m.vertex_count()];
        save_ply(&m, &path, Some(&field), false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("property uchar red"));
        // every vertex line ends with the colormap midpoint
        let body = text.split("end_header").nth(1).unwrap();
        for line in body.lines().take(m.vertex_count()).filter(|l| !l.is_empty()) {
            assert!(line.ends_with("255 255 255"), "line {line:?}");
        }
    }

    #[test]
    fn degenerate_face_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("degen.obj");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0.5 0 0").unwrap();
        writeln!(f, "f 1 2 3").unwrap();
        writeln!(f, "f 1 2 4").unwrap(); // collinear
        drop(f);
        assert!(matches!(
            load_mesh(&path),
            Err(Error::DegenerateFace { face: 1, .. })
        ));
    }
}
