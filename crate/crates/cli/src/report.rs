//! Plain-text tables for terminal output.

/// Left-aligned columns separated by two spaces, header first. Column
/// widths fit the widest cell; rows shorter than the header are padded.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(widths.len()) {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, w) in widths.iter().enumerate() {
            let c = cells.get(i).copied().unwrap_or("");
            if i + 1 == widths.len() {
                s.push_str(c);
            } else {
                s.push_str(&format!("{c:<w$}  "));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_header_only() {
        assert_eq!(format_table(&["class", "ap"], &[]), "class  ap\n");
    }

    #[test]
    fn columns_align() {
        let rows = vec![vec!["Pedestrian".to_string(), "0.5".to_string()], vec!["Car".to_string(), "1".to_string()]];
        let t = format_table(&["class", "ap"], &rows);
        assert_eq!(t, "class       ap\nPedestrian  0.5\nCar         1\n");
    }
}
