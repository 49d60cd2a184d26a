//! Minimal HTML-to-text conversion.
//!
//! Drops script/style/nav/footer (and a few other non-content elements),
//! turns block element boundaries into line breaks, decodes common
//! entities and collapses whitespace. `<title>` goes to the returned title
//! rather than the body text.

const DROPPED: &[&str] = &["script", "style", "nav", "footer", "noscript", "template", "svg", "iframe", "head"];
const RAW_TEXT: &[&str] = &["script", "style"];
const BLOCK: &[&str] = &[
    "address", "article", "aside", "blockquote", "body", "br", "dd", "div", "dl", "dt", "figcaption", "figure",
    "form", "h1", "h2", "h3", "h4", "h5", "h6", "header", "hr", "html", "li", "main", "ol", "p", "pre", "section",
    "table", "tbody", "thead", "tr", "ul",
];
const CELL: &[&str] = &["td", "th"];

struct Tag<'a> {
    name: String,
    closing: bool,
    self_closing: bool,
    rest: &'a str,
}

/// Returns `(text, title)`.
pub fn html_to_text(html: &str) -> (String, Option<String>) {
    let mut lines: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut title: Option<String> = None;
    let mut rest = html;
    // name of the dropped element we are inside and its nesting depth
    let mut dropping: Option<(String, usize)> = None;
    let mut in_title = false;
    let mut title_buf = String::new();

    while !rest.is_empty() {
        if let Some(after) = rest.strip_prefix("<!--") {
            rest = after.find("-->").map_or("", |i| &after[i + 3..]);
            continue;
        }
        if rest.starts_with('<') {
            let Some(tag) = parse_tag(rest) else {
                // a stray '<' is text
                push_text(&mut current, "<", dropping.is_some());
                rest = &rest[1..];
                continue;
            };
            rest = tag.rest;
            let name = tag.name.as_str();

            if name == "title" && dropping.as_ref().is_none_or(|(d, _)| d == "head") {
                if tag.closing {
                    in_title = false;
                    let t = collapse_ws(&title_buf);
                    if !t.is_empty() && title.is_none() {
                        title = Some(t);
                    }
                } else {
                    in_title = true;
                    title_buf.clear();
                }
                continue;
            }

            if let Some((drop_name, depth)) = dropping.as_mut() {
                if name == drop_name {
                    if tag.closing {
                        *depth -= 1;
                        if *depth == 0 {
                            dropping = None;
                        }
                    } else if !tag.self_closing {
                        *depth += 1;
                    }
                }
                continue;
            }

            if !tag.closing && DROPPED.contains(&name) {
                if tag.self_closing {
                    continue;
                }
                if RAW_TEXT.contains(&name) {
                    rest = skip_raw_text(rest, name);
                } else {
                    dropping = Some((name.to_string(), 1));
                }
                continue;
            }

            if BLOCK.contains(&name) {
                flush_line(&mut current, &mut lines);
            } else if CELL.contains(&name) {
                current.push(' ');
            }
            continue;
        }

        let next = rest.find('<').unwrap_or(rest.len());
        let text = decode_entities(&rest[..next]);
        if in_title {
            title_buf.push_str(&text);
        } else {
            push_text(&mut current, &text, dropping.is_some());
        }
        rest = &rest[next..];
    }
    flush_line(&mut current, &mut lines);
    (lines.join("\n"), title)
}

fn push_text(current: &mut String, text: &str, dropped: bool) {
    if !dropped {
        current.push_str(text);
    }
}

fn flush_line(current: &mut String, lines: &mut Vec<String>) {
    let line = collapse_ws(current);
    if !line.is_empty() {
        lines.push(line);
    }
    current.clear();
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_tag(s: &str) -> Option<Tag<'_>> {
    let body = &s[1..];
    let (closing, body) = match body.strip_prefix('/') {
        Some(b) => (true, b),
        None => (false, body),
    };
    if body.starts_with('!') || body.starts_with('?') {
        // doctype or processing instruction
        let end = body.find('>')?;
        return Some(Tag { name: String::new(), closing: true, self_closing: true, rest: &body[end + 1..] });
    }
    let name_len = body.find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == ':')).unwrap_or(body.len());
    if name_len == 0 || !body.starts_with(|c: char| c.is_ascii_alphabetic()) {
        return None;
    }
    let name = body[..name_len].to_ascii_lowercase();
    // find the closing '>' while skipping quoted attribute values
    let mut quote: Option<char> = None;
    for (i, ch) in body[name_len..].char_indices() {
        match (quote, ch) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '"' | '\'') => quote = Some(ch),
            (None, '>') => {
                let end = name_len + i;
                let self_closing = body[..end].ends_with('/');
                return Some(Tag { name, closing, self_closing, rest: &body[end + 1..] });
            }
            _ => {}
        }
    }
    None
}

fn skip_raw_text<'a>(s: &'a str, name: &str) -> &'a str {
    let needle = format!("</{name}");
    let lower = s.to_ascii_lowercase();
    match lower.find(&needle) {
        Some(i) => {
            let after = &s[i..];
            after.find('>').map_or("", |j| &after[j + 1..])
        }
        None => "",
    }
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let end = rest[..rest.len().min(12)].find(';');
        let decoded = end.and_then(|e| decode_entity(&rest[1..e]).map(|c| (c, e)));
        match decoded {
            Some((c, e)) => {
                out.push(c);
                rest = &rest[e + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_entity(name: &str) -> Option<char> {
    if let Some(num) = name.strip_prefix('#') {
        let code = match num.strip_prefix(['x', 'X']) {
            Some(hex) => u32::from_str_radix(hex, 16).ok()?,
            None => num.parse().ok()?,
        };
        return char::from_u32(code);
    }
    Some(match name {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        "nbsp" => ' ',
        "mdash" => '\u{2014}',
        "ndash" => '\u{2013}',
        "hellip" => '\u{2026}',
        "rsquo" => '\u{2019}',
        "lsquo" => '\u{2018}',
        "rdquo" => '\u{201d}',
        "ldquo" => '\u{201c}',
        _ => return None,
    })
}
