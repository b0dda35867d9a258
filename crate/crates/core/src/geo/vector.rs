//! Vector geometries and GeoJSON (RFC 7946) exchange.

use std::path::Path;

use geojson::{Feature, FeatureCollection, GeoJson, Value};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Geometry kinds consumed by the mask generators.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    LineString(Vec<Point>),
    /// Exterior ring followed by holes.
    Polygon(Vec<Vec<Point>>),
    MultiPolygon(Vec<Vec<Vec<Point>>>),
}

impl Geometry {
    pub fn kind(&self) -> &'static str {
        match self {
            Geometry::LineString(_) => "LineString",
            Geometry::Polygon(_) => "Polygon",
            Geometry::MultiPolygon(_) => "MultiPolygon",
        }
    }

    fn to_value(&self) -> Value {
        fn ring(pts: &[Point]) -> Vec<Vec<f64>> {
            pts.iter().map(|p| vec![p.x, p.y]).collect()
        }
        match self {
            Geometry::LineString(pts) => Value::LineString(ring(pts)),
            Geometry::Polygon(rings) => Value::Polygon(rings.iter().map(|r| ring(r)).collect()),
            Geometry::MultiPolygon(polys) => {
                Value::MultiPolygon(polys.iter().map(|p| p.iter().map(|r| ring(r)).collect()).collect())
            }
        }
    }
}

fn points(coords: &[Vec<f64>]) -> Result<Vec<Point>> {
    coords
        .iter()
        .map(|c| match c.as_slice() {
            [x, y, ..] => Ok(Point::new(*x, *y)),
            _ => Err(Error::GeometryType { expected: "position with 2 coordinates", found: format!("{c:?}") }),
        })
        .collect()
}

fn collect_value(value: &Value, out: &mut Vec<Geometry>) -> Result<()> {
    match value {
        Value::LineString(c) => out.push(Geometry::LineString(points(c)?)),
        Value::MultiLineString(lines) => {
            for l in lines {
                out.push(Geometry::LineString(points(l)?));
            }
        }
        Value::Polygon(rings) => out.push(Geometry::Polygon(rings.iter().map(|r| points(r)).collect::<Result<_>>()?)),
        Value::MultiPolygon(polys) => out.push(Geometry::MultiPolygon(
            polys
                .iter()
                .map(|p| p.iter().map(|r| points(r)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?,
        )),
        Value::GeometryCollection(gs) => {
            for g in gs {
                collect_value(&g.value, out)?;
            }
        }
        Value::Point(_) | Value::MultiPoint(_) => {
            return Err(Error::GeometryType { expected: "LineString or Polygon", found: "Point".into() })
        }
    }
    Ok(())
}

/// Parses GeoJSON text into geometries. Features without geometry are skipped.
pub fn parse_geojson(text: &str) -> Result<Vec<Geometry>> {
    let gj: GeoJson = text.parse()?;
    let mut out = Vec::new();
    match gj {
        GeoJson::Geometry(g) => collect_value(&g.value, &mut out)?,
        GeoJson::Feature(f) => {
            if let Some(g) = f.geometry {
                collect_value(&g.value, &mut out)?;
            }
        }
        GeoJson::FeatureCollection(fc) => {
            for f in fc.features {
                if let Some(g) = f.geometry {
                    collect_value(&g.value, &mut out)?;
                }
            }
        }
    }
    Ok(out)
}

pub fn read_geojson(path: impl AsRef<Path>) -> Result<Vec<Geometry>> {
    parse_geojson(&std::fs::read_to_string(path)?)
}

pub fn to_geojson_string(geoms: &[Geometry]) -> String {
    let fc = FeatureCollection {
        bbox: None,
        features: geoms
            .iter()
            .map(|g| Feature {
                bbox: None,
                geometry: Some(geojson::Geometry::new(g.to_value())),
                id: None,
                properties: None,
                foreign_members: None,
            })
            .collect(),
        foreign_members: None,
    };
    GeoJson::FeatureCollection(fc).to_string()
}

pub fn write_geojson(path: impl AsRef<Path>, geoms: &[Geometry]) -> Result<()> {
    std::fs::write(path, to_geojson_string(geoms))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_feature_collection() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{},"geometry":{"type":"LineString","coordinates":[[0,0],[1,1]]}},
            {"type":"Feature","properties":{},"geometry":{"type":"Polygon","coordinates":[[[0,0],[2,0],[2,2],[0,0]]]}},
            {"type":"Feature","properties":{},"geometry":{"type":"MultiPolygon","coordinates":[[[[0,0],[1,0],[1,1],[0,0]]]]}}
        ]}"#;
        let g = parse_geojson(text).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[0].kind(), "LineString");
        assert_eq!(g[1].kind(), "Polygon");
        assert_eq!(g[2].kind(), "MultiPolygon");
    }

    #[test]
    fn write_then_parse() {
        let g = vec![
            Geometry::LineString(vec![Point::new(0.5, 1.5), Point::new(3.0, -2.0)]),
            Geometry::Polygon(vec![vec![
                Point::new(0.0, 0.0),
                Point::new(4.0, 0.0),
                Point::new(4.0, 4.0),
                Point::new(0.0, 0.0),
            ]]),
        ];
        assert_eq!(parse_geojson(&to_geojson_string(&g)).unwrap(), g);
    }

    #[test]
    fn points_are_rejected() {
        let text = r#"{"type":"Point","coordinates":[1,2]}"#;
        assert!(matches!(parse_geojson(text), Err(Error::GeometryType { .. })));
    }
}
