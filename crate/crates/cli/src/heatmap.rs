use std::fmt::Write;

use promptlens_server::api::ExplainResponse;

const RESET: &str = "\x1b[0m";

/// Background for a score scaled into [0, 1]: white at 0, deep blue at 1.
fn shade(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (245.0 - 215.0 * t).round() as u8;
    let g = (245.0 - 175.0 * t).round() as u8;
    let fg = if t > 0.55 { "97" } else { "30" };
    format!("\x1b[{fg};48;2;{r};{g};255m")
}

pub fn render(resp: &ExplainResponse) -> String {
    let mut out = String::new();
    let Some(units) = &resp.units else {
        let _ = writeln!(out, "{}", resp.output_text);
        return out;
    };
    let max = units.iter().map(|u| u.score).fold(0.0_f64, f64::max);
    let mut at = 0;
    for u in units {
        out.push_str(&resp.prompt[at..u.span.0]);
        let t = if max > 0.0 { u.score / max } else { 0.0 };
        let _ = write!(out, "{}{}{RESET}", shade(t), u.text);
        at = u.span.1;
    }
    out.push_str(&resp.prompt[at..]);
    out.push('\n');
    let _ = writeln!(out, "\n→ {}", resp.output_text);
    if let Some(components) = resp.components.as_ref().filter(|c| !c.is_empty()) {
        out.push('\n');
        let width = components
            .iter()
            .map(|c| c.name.chars().count())
            .max()
            .unwrap_or(0);
        for c in components {
            let bar = "█".repeat((c.score.max(0.0) * 40.0).round() as usize);
            let _ = writeln!(out, "{:<width$}  {:.4}  {bar}", c.name, c.score);
        }
    }
    for w in &resp.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
