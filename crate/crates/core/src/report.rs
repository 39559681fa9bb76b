//! Number formatting for the CSV artifacts.

/// Decimal rendering with 9 significant digits. Exponents outside
/// `[-5, 15)` fall back to scientific notation.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    // Round first so that e.g. 9.999999999 reports exponent 1, not 0.
    let sci = format!("{x:.8e}");
    let exp: i32 = sci
        .rsplit('e')
        .next()
        .and_then(|e| e.parse().ok())
        .unwrap_or(0);
    if !(-5..15).contains(&exp) {
        return sci;
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Two-decimal percentage.
pub fn pct2(x: f64) -> String {
    format!("{x:.2}")
}
