//! Occupancy heatmap as a standalone SVG.

use std::fmt::Write;

use canopy_sim::metrics::OccupancyGrid;

const CELL_PX: usize = 6;
const MARGIN_PX: usize = 20;

/// North is up, east to the right. Cells shade from white (never visited)
/// to dark blue (visited by every run).
pub fn heatmap(grid: &OccupancyGrid, runs: usize, title: &str) -> String {
    let (rows, cols) = (grid.rows(), grid.cols());
    let width = cols * CELL_PX + 2 * MARGIN_PX;
    let height = rows * CELL_PX + 2 * MARGIN_PX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let top = rows * CELL_PX + MARGIN_PX;
    for (i, row) in grid.counts.iter().enumerate() {
        for (j, &k) in row.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let t = k as f64 / runs.max(1) as f64;
            let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL_PX}" height="{CELL_PX}" fill="rgb({},{},{})"><title>{k}</title></rect>"#,
                MARGIN_PX + j * CELL_PX,
                top - (i + 1) * CELL_PX,
                shade(8.0),
                shade(48.0),
                shade(107.0),
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_PX}" y="{}" font-family="sans-serif" font-size="12">N {:.1} to {:.1} m, E {:.1} to {:.1} m, {} m cells</text>"#,
        MARGIN_PX - 6,
        grid.origin.x,
        grid.origin.x + rows as f64 * grid.cell_size,
        grid.origin.y,
        grid.origin.y + cols as f64 * grid.cell_size,
        grid.cell_size,
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
