//! Interpretability diagnostics: handcrafted mask features, their correlation
//! with labeled latent dimensions, open-set distance analysis and scatter
//! export.

use std::fmt::Write as _;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::metrics::DimensionLabel;
use crate::stats::pearson;
use crate::tensorio::Image;
use crate::trees::{fit_gbt, GbtConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedFeatures {
    pub area: usize,
    pub mean_color: Vec<f64>,
    pub solidity: f64,
}

type Point = (i64, i64);

fn cross(o: Point, a: Point, b: Point) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain convex hull in counter-clockwise order without collinear
/// vertices.
pub fn convex_hull(mut points: Vec<Point>) -> Vec<Point> {
    points.sort_unstable();
    points.dedup();
    if points.len() < 3 {
        return points;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * points.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 { Box::new(points.iter()) } else { Box::new(points.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Twice the signed shoelace area.
pub fn shoelace2(polygon: &[Point]) -> i64 {
    (0..polygon.len())
        .map(|i| {
            let (a, b) = (polygon[i], polygon[(i + 1) % polygon.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum()
}

/// Corner points of the foreground pixels. Interior corners never reach the
/// hull, so only pixels with a background 4-neighbour contribute.
fn boundary_corners(mask: &[bool], height: usize, width: usize) -> Vec<Point> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize];
    let mut pts = Vec::new();
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                pts.extend([(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]);
            }
        }
    }
    pts
}

/// Foreground area over the area of the convex hull of its pixel squares.
pub fn solidity(mask: &[bool], height: usize, width: usize) -> Result<f64> {
    if mask.len() != height * width {
        return Err(Error::DimensionMismatch {
            expected: height * width,
            actual: mask.len(),
        });
    }
    let area = mask.iter().filter(|&&m| m).count();
    if area == 0 {
        return Err(Error::invalid("mask has no foreground pixels"));
    }
    let hull = convex_hull(boundary_corners(mask, height, width));
    Ok(2.0 * area as f64 / shoelace2(&hull) as f64)
}

pub fn handcrafted(image: &Image, mask: &[bool]) -> Result<HandcraftedFeatures> {
    let solidity = solidity(mask, image.height, image.width)?;
    let mut sum = vec![0.0; image.channels];
    let mut area = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let px = &image.data[i * image.channels..(i + 1) * image.channels];
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += f64::from(v);
        }
        area += 1;
    }
    Ok(HandcraftedFeatures {
        area,
        mean_color: sum.into_iter().map(|s| s / area as f64).collect(),
        solidity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub feature: String,
    pub factor: String,
    pub dimension: Option<usize>,
    /// `None` when no dimension carries the label or a series is constant.
    pub r: Option<f64>,
}

/// The dimension labeled `factor` with the highest confidence, lowest index
/// on ties.
pub fn dimension_for(labels: &[DimensionLabel], factor: &str) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, l) in labels.iter().enumerate() {
        if l.label.eq_ignore_ascii_case(factor) && best.is_none_or(|b| l.confidence > labels[b].confidence) {
            best = Some(j);
        }
    }
    best
}

const CHANNELS: [&str; 3] = ["red", "green", "blue"];

/// Pearson r between each handcrafted feature and the dimension labeled with
/// the matching factor: Scale with area, Color with each channel mean, Shape
/// with solidity.
pub fn correlate(features: &[HandcraftedFeatures], z: ArrayView2<f64>, labels: &[DimensionLabel]) -> Result<Vec<Correlation>> {
    if features.len() != z.nrows() || features.len() < 3 {
        return Err(Error::invalid(format!(
            "correlation needs at least 3 aligned rows, got {} features and {} codes",
            features.len(),
            z.nrows()
        )));
    }
    if labels.len() != z.ncols() {
        return Err(Error::DimensionMismatch {
            expected: z.ncols(),
            actual: labels.len(),
        });
    }
    let mut series: Vec<(String, &str, Vec<f64>)> = vec![("area".into(), "Scale", features.iter().map(|f| f.area as f64).collect())];
    for c in 0..features[0].mean_color.len() {
        let name = CHANNELS.get(c).map_or_else(|| format!("channel{c}"), |s| s.to_string());
        series.push((name, "Color", features.iter().map(|f| f.mean_color[c]).collect()));
    }
    series.push(("solidity".into(), "Shape", features.iter().map(|f| f.solidity).collect()));
    Ok(series
        .into_iter()
        .map(|(feature, factor, values)| {
            let dimension = dimension_for(labels, factor);
            let r = dimension.and_then(|j| pearson(&values, &z.column(j).to_vec()));
            Correlation {
                feature,
                factor: factor.into(),
                dimension,
                r,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDimension {
    pub dimension: usize,
    pub label: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetReport {
    pub predicted_class: usize,
    /// Prediction count per class over the anomaly samples.
    pub prediction_counts: Vec<usize>,
    /// Set when several classes tie for the most predictions.
    pub tie: bool,
    /// `|mean anomaly code - predicted-class centroid|` per dimension.
    pub distances: Vec<f64>,
    /// Dimensions by descending distance, lowest index first on ties.
    pub ranking: Vec<RankedDimension>,
}

/// Classifies the anomalies with a GBT fit on the training codes and measures
/// how far they sit from the centroid of the class they are mistaken for.
pub fn openset(
    train_z: ArrayView2<f64>,
    train_y: &[usize],
    anomaly_z: ArrayView2<f64>,
    labels: &[DimensionLabel],
    trees: &GbtConfig,
) -> Result<OpenSetReport> {
    if anomaly_z.nrows() == 0 {
        return Err(Error::invalid("no anomaly samples"));
    }
    if anomaly_z.ncols() != train_z.ncols() || labels.len() != train_z.ncols() {
        return Err(Error::DimensionMismatch {
            expected: train_z.ncols(),
            actual: if anomaly_z.ncols() != train_z.ncols() { anomaly_z.ncols() } else { labels.len() },
        });
    }
    let model = fit_gbt(train_z, train_y, trees)?;
    let pred = model.predict(anomaly_z)?;
    let mut counts = vec![0; model.n_classes];
    for &p in &pred {
        counts[p] += 1;
    }
    let top = *counts.iter().max().expect("at least one class");
    let predicted_class = counts.iter().position(|&c| c == top).expect("max exists");
    let tie = counts.iter().filter(|&&c| c == top).count() > 1;
    if tie {
        log::warn!("open-set predictions tie; using class {predicted_class}");
    }
    let members: Vec<usize> = (0..train_y.len()).filter(|&i| train_y[i] == predicted_class).collect();
    let centroid = train_z.select(Axis(0), &members).mean_axis(Axis(0)).expect("predicted class has training rows");
    let anomaly_mean = anomaly_z.mean_axis(Axis(0)).expect("non-empty");
    let distances: Vec<f64> = anomaly_mean.iter().zip(&centroid).map(|(a, c)| (a - c).abs()).collect();
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    Ok(OpenSetReport {
        predicted_class,
        prediction_counts: counts,
        tie,
        ranking: order
            .into_iter()
            .map(|j| RankedDimension {
                dimension: j,
                label: labels[j].label.clone(),
                distance: distances[j],
            })
            .collect(),
        distances,
    })
}

/// Delimited `x,y,class` table preceded by a `#` line naming the dimensions.
pub fn export_scatter(z: ArrayView2<f64>, classes: &[String], dims: (usize, usize), names: (&str, &str)) -> Result<String> {
    if dims.0 == dims.1 {
        return Err(Error::invalid(format!("scatter needs two different dimensions, got {} twice", dims.0)));
    }
    if dims.0.max(dims.1) >= z.ncols() {
        return Err(Error::invalid(format!("dimension {} out of range for {} columns", dims.0.max(dims.1), z.ncols())));
    }
    if classes.len() != z.nrows() {
        return Err(Error::invalid(format!("{} rows but {} class names", z.nrows(), classes.len())));
    }
    let mut out = format!("# x=dim{} ({}) y=dim{} ({})\n", dims.0, names.0, dims.1, names.1);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "class"])?;
    for (row, class) in z.rows().into_iter().zip(classes) {
        w.write_record([row[dims.0].to_string(), row[dims.1].to_string(), class.clone()])?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
    Ok(out)
}

/// Parses a table written by [`export_scatter`].
pub fn read_scatter(text: &str) -> Result<Vec<(f64, f64, String)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::Format(format!("bad number `{}`", &rec[i])));
            Ok((num(0)?, num(1)?, rec[2].to_string()))
        })
        .collect()
}

/// Fixed-size SVG scatter, one color per class in order of first appearance.
pub fn scatter_svg(points: &[(f64, f64, String)]) -> String {
    const SIDE: f64 = 480.0;
    const PAD: f64 = 24.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let bounds = |f: fn(&(f64, f64, String)) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (xs, ys) = (bounds(|p| p.0), bounds(|p| p.1));
    let scale = |v: f64, (lo, hi): (f64, f64)| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let mut classes: Vec<&str> = Vec::new();
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIDE}\" height=\"{SIDE}\">\n");
    for (x, y, c) in points {
        let k = classes.iter().position(|k| k == c).unwrap_or_else(|| {
            classes.push(c);
            classes.len() - 1
        });
        let px = PAD + scale(*x, xs) * (SIDE - 2.0 * PAD);
        let py = SIDE - PAD - scale(*y, ys) * (SIDE - 2.0 * PAD);
        let _ = writeln!(svg, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"{}\"/>", COLORS[k % COLORS.len()]);
    }
    svg.push_str("</svg>\n");
    svg
}
