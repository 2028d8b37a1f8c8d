use std::fmt::Write;

use super::{LinearProgram, Relation, Sense};

fn num(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 12 {
        s
    } else {
        // shortest round-trip form is kept even when it spills the field
        format!("{v:e}")
    }
}

/// Fixed-format MPS. Rows are named `R<i>`, columns `C<j>`; columns listed in
/// `integer_vars` are wrapped in INTORG markers.
pub fn write_mps(lp: &LinearProgram, integer_vars: &[usize], name: &str) -> String {
    let n = lp.num_vars();
    let mut is_int = vec![false; n];
    for &j in integer_vars {
        if j < n {
            is_int[j] = true;
        }
    }
    let mut cols: Vec<Vec<(String, f64)>> = vec![Vec::new(); n];
    for (j, &c) in lp.objective.iter().enumerate() {
        if c != 0.0 {
            cols[j].push(("OBJ".to_string(), c));
        }
    }
    for (i, row) in lp.constraints.iter().enumerate() {
        for &(j, a) in &row.terms {
            if a != 0.0 {
                cols[j].push((format!("R{i}"), a));
            }
        }
    }

    let mut out = String::new();
    let _ = writeln!(out, "NAME          {name}");
    if lp.sense == Sense::Maximize {
        let _ = writeln!(out, "OBJSENSE\n    MAX");
    }
    let _ = writeln!(out, "ROWS");
    let _ = writeln!(out, " N  OBJ");
    for (i, row) in lp.constraints.iter().enumerate() {
        let t = match row.relation {
            Relation::Le => 'L',
            Relation::Eq => 'E',
            Relation::Ge => 'G',
        };
        let _ = writeln!(out, " {t}  R{i}");
    }
    let _ = writeln!(out, "COLUMNS");
    let mut in_int = false;
    let mut marker = 0;
    for (j, entries) in cols.iter().enumerate() {
        if is_int[j] != in_int {
            let kind = if is_int[j] { "'INTORG'" } else { "'INTEND'" };
            let _ = writeln!(out, "    {:<8}  'MARKER'                 {kind}", format!("M{marker}"));
            marker += 1;
            in_int = is_int[j];
        }
        let cname = format!("C{j}");
        if entries.is_empty() {
            // keep the column declared
            let _ = writeln!(out, "    {:<8}  {:<8}  {:>12}", cname, "OBJ", "0");
        }
        for (rname, v) in entries {
            let _ = writeln!(out, "    {:<8}  {:<8}  {:>12}", cname, rname, num(*v));
        }
    }
    if in_int {
        let _ = writeln!(
            out,
            "    {:<8}  'MARKER'                 'INTEND'",
            format!("M{marker}")
        );
    }
    let _ = writeln!(out, "RHS");
    for (i, row) in lp.constraints.iter().enumerate() {
        if row.rhs != 0.0 {
            let _ = writeln!(out, "    {:<8}  {:<8}  {:>12}", "RHS", format!("R{i}"), num(row.rhs));
        }
    }
    let _ = writeln!(out, "BOUNDS");
    for j in 0..n {
        let (l, u) = (lp.lower[j], lp.upper[j]);
        let c = format!("C{j}");
        if is_int[j] && l == 0.0 && u == 1.0 {
            let _ = writeln!(out, " BV BND       {c}");
            continue;
        }
        if l == u {
            let _ = writeln!(out, " FX BND       {:<8}  {:>12}", c, num(l));
            continue;
        }
        match (l.is_finite(), u.is_finite()) {
            (false, false) => {
                let _ = writeln!(out, " FR BND       {c}");
            }
            (false, true) => {
                let _ = writeln!(out, " MI BND       {c}");
                let _ = writeln!(out, " UP BND       {:<8}  {:>12}", c, num(u));
            }
            (true, fin_u) => {
                if l != 0.0 {
                    let _ = writeln!(out, " LO BND       {:<8}  {:>12}", c, num(l));
                }
                if fin_u {
                    let _ = writeln!(out, " UP BND       {:<8}  {:>12}", c, num(u));
                }
            }
        }
    }
    let _ = writeln!(out, "ENDATA");
    out
}
