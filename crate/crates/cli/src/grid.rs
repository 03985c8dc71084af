//! Lambda grids such as `0,0.25,1` or `0,0.1,...,1`.

/// Values are rounded to 12 decimals so `0.1 * 3` prints as `0.3`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, String> {
    let tokens: Vec<&str> = text.split(',').map(str::trim).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == "..." {
            if out.len() < 2 || i + 1 >= tokens.len() {
                return Err("`...` needs two values before it and one after".into());
            }
            let first = out[out.len() - 2];
            let last = out[out.len() - 1];
            let step: f64 = last - first;
            let end = number(tokens[i + 1])?;
            if step <= 0.0 || end < last {
                return Err(format!("cannot step from {last} to {end} by {step}"));
            }
            let count = ((end - last) / step + 1e-9).floor() as usize;
            for k in 1..=count {
                out.push(round12(last + k as f64 * step));
            }
            if (round12(end) - out[out.len() - 1]).abs() > 1e-9 {
                out.push(round12(end));
            }
            i += 2;
        } else {
            out.push(round12(number(tokens[i])?));
            i += 1;
        }
    }
    if let Some(bad) = out.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("lambda {bad} is outside [0, 1]"));
    }
    Ok(out)
}

fn number(tok: &str) -> Result<f64, String> {
    let v: f64 = tok.parse().map_err(|_| format!("{tok:?} is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{tok:?} is not finite"));
    }
    Ok(v)
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}
