//! Text extraction for text-only PDFs.
//!
//! Walks every stream object, inflates FlateDecode data, and interprets the
//! text-showing operators of content streams (`Tj`, `TJ`, `'`, `"`) plus the
//! line-moving ones (`T*`, `Td`, `TD`, `ET`). Fonts are assumed to use a
//! single-byte encoding; scanned pages and CID fonts are not handled.

use std::io::Read;

use flate2::read::ZlibDecoder;

/// Extracts text from PDF bytes. Returns an empty string when nothing
/// readable is found; the caller decides whether that is an error.
pub fn pdf_to_text(bytes: &[u8]) -> String {
    let mut pages = Vec::new();
    for (dict, data) in streams(bytes) {
        if is_non_content(dict) {
            continue;
        }
        let decoded = if contains(dict, b"/FlateDecode") {
            let mut out = Vec::new();
            if ZlibDecoder::new(data).read_to_end(&mut out).is_err() {
                continue;
            }
            out
        } else if contains(dict, b"/Filter") {
            // other filters are not supported
            continue;
        } else {
            data.to_vec()
        };
        if !(contains(&decoded, b"BT") && (contains(&decoded, b"Tj") || contains(&decoded, b"TJ"))) {
            continue;
        }
        let text = content_stream_text(&decoded);
        let text = text.lines().map(str::trim_end).collect::<Vec<_>>().join("\n");
        let text = text.trim_matches('\n');
        if !text.trim().is_empty() {
            pages.push(text.to_string());
        }
    }
    pages.join("\n\n")
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    find(hay, needle, 0).is_some()
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if from >= hay.len() {
        return None;
    }
    hay[from..].windows(needle.len()).position(|w| w == needle).map(|p| p + from)
}

fn is_non_content(dict: &[u8]) -> bool {
    [&b"/Image"[..], b"/XRef", b"/ObjStm", b"/Length1", b"/FontFile", b"/Metadata"]
        .iter()
        .any(|k| contains(dict, k))
}

/// Yields `(dictionary, raw stream data)` pairs in file order.
fn streams(bytes: &[u8]) -> Vec<(&[u8], &[u8])> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(at) = find(bytes, b"stream", pos) {
        pos = at + 6;
        if at >= 3 && &bytes[at - 3..at] == b"end" {
            continue;
        }
        let mut data_start = at + 6;
        if bytes.get(data_start) == Some(&b'\r') {
            data_start += 1;
        }
        if bytes.get(data_start) == Some(&b'\n') {
            data_start += 1;
        }
        let Some(end) = find(bytes, b"endstream", data_start) else {
            break;
        };
        let mut data_end = end;
        while data_end > data_start && matches!(bytes[data_end - 1], b'\n' | b'\r') {
            data_end -= 1;
        }
        let dict_start = bytes[..at].windows(3).rposition(|w| w == b"obj").map_or(0, |p| p + 3);
        out.push((&bytes[dict_start..at], &bytes[data_start..data_end]));
        pos = end + 9;
    }
    out
}

enum Token {
    Str(Vec<u8>),
    Num(f64),
    ArrayStart,
    ArrayEnd,
    Op(String),
}

fn content_stream_text(data: &[u8]) -> String {
    let tokens = tokenize(data);
    let mut out = String::new();
    let mut operands: Vec<Token> = Vec::new();
    let mut array: Option<Vec<Token>> = None;

    for tok in tokens {
        match tok {
            Token::ArrayStart => array = Some(Vec::new()),
            Token::ArrayEnd => {
                if let Some(items) = array.take() {
                    show_array(&items, &mut out);
                }
            }
            t if array.is_some() => array.as_mut().unwrap().push(t),
            Token::Op(op) => {
                match op.as_str() {
                    "Tj" => show_last_string(&operands, &mut out),
                    "'" | "\"" => {
                        out.push('\n');
                        show_last_string(&operands, &mut out);
                    }
                    "T*" | "ET" => newline(&mut out),
                    "Td" | "TD" => {
                        let ty = operands.iter().rev().find_map(|t| match t {
                            Token::Num(n) => Some(*n),
                            _ => None,
                        });
                        if ty.is_some_and(|ty| ty != 0.0) {
                            newline(&mut out);
                        } else if !out.ends_with([' ', '\n']) && !out.is_empty() {
                            out.push(' ');
                        }
                    }
                    // the array was already shown when it closed
                    _ => {}
                }
                operands.clear();
            }
            other => operands.push(other),
        }
    }
    out
}

fn newline(out: &mut String) {
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
}

fn show_last_string(operands: &[Token], out: &mut String) {
    if let Some(Token::Str(bytes)) = operands.iter().rev().find(|t| matches!(t, Token::Str(_))) {
        out.extend(bytes.iter().map(|&b| b as char));
    }
}

fn show_array(items: &[Token], out: &mut String) {
    for item in items {
        match item {
            Token::Str(bytes) => out.extend(bytes.iter().map(|&b| b as char)),
            // large negative kerning is a word gap
            Token::Num(n) if *n < -200.0 => out.push(' '),
            _ => {}
        }
    }
}

fn tokenize(data: &[u8]) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < data.len() {
        let c = data[i];
        match c {
            b' ' | b'\t' | b'\r' | b'\n' | b'\x0c' | b'\0' => i += 1,
            b'%' => {
                while i < data.len() && data[i] != b'\n' && data[i] != b'\r' {
                    i += 1;
                }
            }
            b'(' => {
                let (s, next) = literal_string(data, i + 1);
                tokens.push(Token::Str(s));
                i = next;
            }
            b'<' if data.get(i + 1) == Some(&b'<') => {
                // inline dictionary (e.g. marked content properties): skip
                let mut depth = 0;
                while i < data.len() {
                    if data[i..].starts_with(b"<<") {
                        depth += 1;
                        i += 2;
                    } else if data[i..].starts_with(b">>") {
                        depth -= 1;
                        i += 2;
                        if depth == 0 {
                            break;
                        }
                    } else {
                        i += 1;
                    }
                }
            }
            b'<' => {
                let end = data[i..].iter().position(|&b| b == b'>').map_or(data.len(), |p| i + p);
                tokens.push(Token::Str(hex_string(&data[i + 1..end])));
                i = end + 1;
            }
            b'[' => {
                tokens.push(Token::ArrayStart);
                i += 1;
            }
            b']' => {
                tokens.push(Token::ArrayEnd);
                i += 1;
            }
            b'/' => {
                i += 1;
                while i < data.len() && !is_delim(data[i]) {
                    i += 1;
                }
            }
            _ => {
                let start = i;
                while i < data.len() && !is_delim(data[i]) {
                    i += 1;
                }
                if i == start {
                    i += 1;
                    continue;
                }
                let word = String::from_utf8_lossy(&data[start..i]).into_owned();
                match word.parse::<f64>() {
                    Ok(n) => tokens.push(Token::Num(n)),
                    Err(_) => tokens.push(Token::Op(word)),
                }
            }
        }
    }
    tokens
}

fn is_delim(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n' | b'\x0c' | b'\0' | b'(' | b')' | b'<' | b'>' | b'[' | b']' | b'/' | b'%')
}

fn literal_string(data: &[u8], mut i: usize) -> (Vec<u8>, usize) {
    let mut out = Vec::new();
    let mut depth = 1;
    while i < data.len() {
        let c = data[i];
        i += 1;
        match c {
            b'\\' if i < data.len() => {
                let e = data[i];
                i += 1;
                match e {
                    b'n' => out.push(b'\n'),
                    b'r' => out.push(b'\r'),
                    b't' => out.push(b'\t'),
                    b'b' => out.push(8),
                    b'f' => out.push(12),
                    b'0'..=b'7' => {
                        let mut v = u32::from(e - b'0');
                        for _ in 0..2 {
                            match data.get(i) {
                                Some(d @ b'0'..=b'7') => {
                                    v = v * 8 + u32::from(d - b'0');
                                    i += 1;
                                }
                                _ => break,
                            }
                        }
                        out.push(v as u8);
                    }
                    b'\r' => {
                        if data.get(i) == Some(&b'\n') {
                            i += 1;
                        }
                    }
                    b'\n' => {}
                    other => out.push(other),
                }
            }
            b'(' => {
                depth += 1;
                out.push(c);
            }
            b')' => {
                depth -= 1;
                if depth == 0 {
                    break;
                }
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    (out, i)
}

fn hex_string(hex: &[u8]) -> Vec<u8> {
    let digits: Vec<u8> = hex
        .iter()
        .filter_map(|&b| (b as char).to_digit(16).map(|d| d as u8))
        .collect();
    digits.chunks(2).map(|p| (p[0] << 4) | p.get(1).copied().unwrap_or(0)).collect()
}
