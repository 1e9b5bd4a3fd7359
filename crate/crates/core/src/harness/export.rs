//! Gantt, trace and curve export plus static SVG plots.

use std::fmt::Write as _;

use crate::env::{EntityRef, GanttInterval, TraceEvent};

pub fn entity_name(e: EntityRef) -> String {
    match e {
        EntityRef::Human(k) => format!("human{k}"),
        EntityRef::Robot(k) => format!("robot{k}"),
        EntityRef::Machine(k) => format!("machine{k}"),
    }
}

const PALETTE: [&str; 10] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"];

pub fn task_color(task: usize) -> &'static str {
    PALETTE[task % PALETTE.len()]
}

/// `entity,task,start,end,color` rows sorted by entity then start.
pub fn gantt_csv(intervals: &[GanttInterval]) -> String {
    let mut sorted = intervals.to_vec();
    sorted.sort_by_key(|g| (g.entity, g.start, g.end, g.task));
    let mut s = String::from("entity,task,start,end,color\n");
    for g in sorted {
        let _ = writeln!(s, "{},{},{},{},{}", entity_name(g.entity), g.task, g.start, g.end, task_color(g.task));
    }
    s
}

/// Line-delimited `tick entity event fatigue` records.
pub fn trace_lines(events: &[TraceEvent]) -> String {
    let mut s = String::new();
    for e in events {
        let _ = writeln!(s, "{} {} {} {}", e.tick, entity_name(e.entity), e.event, e.fatigue);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanttRow {
    pub entity: String,
    pub task: usize,
    pub start: u32,
    pub end: u32,
}

pub fn parse_gantt_csv(text: &str) -> Result<Vec<GanttRow>, String> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() < 4 {
                return Err(format!("short gantt row {l:?}"));
            }
            let num = |s: &str| s.trim().parse::<u64>().map_err(|_| format!("bad number in {l:?}"));
            Ok(GanttRow { entity: f[0].to_string(), task: num(f[1])? as usize, start: num(f[2])? as u32, end: num(f[3])? as u32 })
        })
        .collect()
}

/// True when no entity has two overlapping intervals.
pub fn gantt_is_consistent(rows: &[GanttRow]) -> bool {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.entity, a.start).cmp(&(&b.entity, b.start)));
    rows.iter().all(|r| r.start <= r.end) && sorted.windows(2).all(|w| w[0].entity != w[1].entity || w[0].end <= w[1].start)
}

pub fn gantt_svg(rows: &[GanttRow]) -> String {
    let mut entities: Vec<&str> = rows.iter().map(|r| r.entity.as_str()).collect();
    entities.sort_unstable();
    entities.dedup();
    let t_max = rows.iter().map(|r| r.end).max().unwrap_or(1).max(1) as f64;
    let (left, width, lane) = (90.0, 800.0, 26.0);
    let height = 40.0 + lane * entities.len() as f64;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n", left + width + 20.0, height);
    for (i, e) in entities.iter().enumerate() {
        let y = 20.0 + lane * i as f64;
        let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">{}</text>", y + 15.0, e);
        for r in rows.iter().filter(|r| r.entity == *e) {
            let x0 = left + width * r.start as f64 / t_max;
            let w = (width * (r.end - r.start) as f64 / t_max).max(1.0);
            let _ = writeln!(
                s,
                "<rect x=\"{x0:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{:.1}\" fill=\"{}\"><title>task {} [{}, {})</title></rect>",
                lane - 6.0,
                task_color(r.task),
                r.task,
                r.start,
                r.end
            );
        }
    }
    let _ = writeln!(s, "<text x=\"{left}\" y=\"{:.1}\">0</text><text x=\"{:.1}\" y=\"{:.1}\">{}</text>", height - 4.0, left + width - 20.0, height - 4.0, t_max);
    s.push_str("</svg>\n");
    s
}

/// Line chart of one or more series sharing the x axis.
pub fn line_svg(title: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let (left, top, width, height) = (60.0, 30.0, 700.0, 300.0);
    let finite = |v: &f64| v.is_finite();
    let xs: Vec<f64> = x.iter().copied().filter(finite).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(finite).collect();
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |v: f64| left + width * (v - x0) / (x1 - x0);
    let py = |v: f64| top + height * (1.0 - (v - y0) / (y1 - y0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n<text x=\"{left}\" y=\"18\">{}</text>\n",
        left + width + 140.0,
        top + height + 40.0,
        title
    );
    let _ = writeln!(s, "<rect x=\"{left}\" y=\"{top}\" width=\"{width}\" height=\"{height}\" fill=\"none\" stroke=\"#888\"/>");
    let _ = writeln!(s, "<text x=\"{left}\" y=\"{:.1}\">{x0}</text><text x=\"{:.1}\" y=\"{:.1}\">{x1}</text>", top + height + 14.0, left + width - 30.0, top + height + 14.0);
    let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">{y1:.3}</text><text x=\"4\" y=\"{:.1}\">{y0:.3}</text>", top + 10.0, top + height);
    for (i, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = x.iter().zip(ys).filter(|(a, b)| a.is_finite() && b.is_finite()).map(|(&a, &b)| format!("{:.1},{:.1}", px(a), py(b))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>", PALETTE[i % PALETTE.len()], pts.join(" "));
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>", left + width + 10.0, top + 14.0 * (i + 1) as f64, PALETTE[i % PALETTE.len()], name);
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Parse a CSV with a header into named numeric columns; non-numeric cells
/// become NaN.
pub fn parse_numeric_csv(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(|h| h.trim().to_string()).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for l in lines {
        for (i, cell) in l.split(',').enumerate().take(header.len()) {
            cols[i].push(cell.trim().parse().unwrap_or(f64::NAN));
        }
    }
    (header, cols)
}

/// Plot an exported CSV: Gantt files as Gantt charts, learning curves as
/// return/makespan lines, result tables as metric-per-config bars rendered
/// as lines over config order.
pub fn plot_csv(name: &str, text: &str) -> Result<String, String> {
    let first = text.lines().next().unwrap_or("");
    if first.starts_with("entity,task,start,end") {
        return Ok(gantt_svg(&parse_gantt_csv(text)?));
    }
    if first.starts_with("config,humans,robots,metric") {
        let mut metrics: Vec<String> = Vec::new();
        let mut configs: Vec<String> = Vec::new();
        let rows: Vec<Vec<&str>> = text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
        for r in &rows {
            if !metrics.iter().any(|m| m == r[3]) {
                metrics.push(r[3].to_string());
            }
            if !configs.iter().any(|c| c == r[0]) {
                configs.push(r[0].to_string());
            }
        }
        let x: Vec<f64> = (0..configs.len()).map(|i| i as f64).collect();
        let series: Vec<(&str, Vec<f64>)> = metrics
            .iter()
            .map(|m| {
                let ys = configs
                    .iter()
                    .map(|c| rows.iter().find(|r| r[0] == c && r[3] == m).and_then(|r| r[4].parse().ok()).unwrap_or(f64::NAN))
                    .collect();
                (m.as_str(), ys)
            })
            .collect();
        return Ok(line_svg(&format!("{name} ({})", configs.join(" | ")), &x, &series));
    }
    let (header, cols) = parse_numeric_csv(text);
    if header.is_empty() || cols.is_empty() || cols[0].is_empty() {
        return Err(format!("{name}: nothing to plot"));
    }
    let series: Vec<(&str, Vec<f64>)> = header.iter().zip(&cols).skip(1).filter(|(_, c)| c.iter().any(|v| v.is_finite())).map(|(h, c)| (h.as_str(), c.clone())).collect();
    Ok(line_svg(name, &cols[0], &series))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gantt_round_trip_and_overlap_check() {
        let iv = vec![
            GanttInterval { entity: EntityRef::Robot(0), task: 2, start: 5, end: 9 },
            GanttInterval { entity: EntityRef::Human(0), task: 1, start: 0, end: 4 },
            GanttInterval { entity: EntityRef::Human(0), task: 3, start: 4, end: 6 },
        ];
        let csv = gantt_csv(&iv);
        let rows = parse_gantt_csv(&csv).unwrap();
        assert_eq!(rows[0], GanttRow { entity: "human0".into(), task: 1, start: 0, end: 4 });
        assert!(gantt_is_consistent(&rows));
        let mut bad = rows.clone();
        bad[1].start = 3;
        assert!(!gantt_is_consistent(&bad));
        assert!(gantt_svg(&rows).contains("<rect"));
    }

    #[test]
    fn plots_curves_and_tables() {
        let curves = "episode,return,makespan\n0,1.5,400\n1,2.0,380\n";
        let svg = plot_csv("curves", curves).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        let table = "config,humans,robots,metric,mean,std,n\na,1,1,makespan,3,0,1\nb,1,1,makespan,4,0,1\n";
        assert!(plot_csv("t", table).unwrap().contains("polyline"));
        assert!(plot_csv("e", "").is_err());
    }
}
