//! Audio enclosure discovery in RSS 2.0 and Atom feeds.

use std::collections::HashSet;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

pub const AUDIO_EXTENSIONS: [&str; 6] = [".mp3", ".m4a", ".wav", ".ogg", ".flac", ".aac"];

#[derive(Debug, Error, PartialEq)]
pub enum RssError {
    #[error("malformed XML at byte {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("unsupported feed format: root element <{0}> is neither <rss> nor <feed>")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedRecord {
    pub feed_url: String,
    pub language_label: String,
    /// Unix seconds.
    pub fetched_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclosureRecord {
    pub feed_url: String,
    pub item_guid: String,
    pub enclosure_url: String,
    pub mime_type: String,
    pub declared_length_bytes: Option<u64>,
}

fn mime_for_extension(path: &str) -> Option<&'static str> {
    let ext = AUDIO_EXTENSIONS.iter().find(|e| path.ends_with(*e))?;
    Some(match *ext {
        ".mp3" => "audio/mpeg",
        ".m4a" => "audio/mp4",
        ".wav" => "audio/wav",
        ".ogg" => "audio/ogg",
        ".flac" => "audio/flac",
        _ => "audio/aac",
    })
}

/// True if the MIME type is `audio/*` or the URL path has a known audio
/// extension.
pub fn is_audio(mime_type: &str, url: &Url) -> bool {
    mime_type.to_ascii_lowercase().starts_with("audio/")
        || mime_for_extension(&url.path().to_ascii_lowercase()).is_some()
}

#[derive(Default)]
struct RawEnclosure {
    url: Option<String>,
    mime: Option<String>,
    length: Option<String>,
}

#[derive(Default)]
struct Item {
    guid: Option<String>,
    link: Option<String>,
    enclosures: Vec<RawEnclosure>,
}

#[derive(Clone, Copy, PartialEq)]
enum Flavor {
    Rss,
    Atom,
}

fn attrs(e: &BytesStart<'_>, offset: u64) -> Result<Vec<(String, String)>, RssError> {
    let mut out = Vec::new();
    for a in e.attributes() {
        let a = a.map_err(|err| RssError::Malformed {
            offset,
            message: err.to_string(),
        })?;
        let key = String::from_utf8_lossy(a.key.local_name().as_ref()).into_owned();
        let value = a
            .unescape_value()
            .map_err(|err| RssError::Malformed {
                offset,
                message: err.to_string(),
            })?
            .into_owned();
        out.push((key, value));
    }
    Ok(out)
}

fn get<'a>(attrs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// Extracts audio enclosures from an RSS 2.0 or Atom document, in feed
/// order, keeping the first occurrence of each enclosure URL. Relative
/// enclosure URLs are resolved against `feed_url`; entries whose URL cannot
/// be made absolute are skipped.
pub fn parse_rss(feed_url: &str, feed_xml: &[u8]) -> Result<Vec<EnclosureRecord>, RssError> {
    let mut reader = Reader::from_reader(feed_xml);
    reader.config_mut().trim_text(true);
    let base = Url::parse(feed_url).ok();

    let mut buf = Vec::new();
    let mut stack: Vec<String> = Vec::new();
    let mut flavor: Option<Flavor> = None;
    let mut item: Option<Item> = None;
    let mut items: Vec<Item> = Vec::new();

    loop {
        let offset = reader.buffer_position();
        let event = reader.read_event_into(&mut buf).map_err(|e| RssError::Malformed {
            offset: reader.error_position(),
            message: e.to_string(),
        })?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                let name = String::from_utf8_lossy(e.local_name().as_ref()).into_owned();
                if flavor.is_none() {
                    flavor = Some(match name.as_str() {
                        "rss" => Flavor::Rss,
                        "feed" => Flavor::Atom,
                        _ => return Err(RssError::Format(name)),
                    });
                }
                let fl = flavor.expect("set above");
                match (fl, name.as_str()) {
                    (Flavor::Rss, "item") | (Flavor::Atom, "entry") => item = Some(Item::default()),
                    (Flavor::Rss, "enclosure") => {
                        if let Some(it) = item.as_mut() {
                            let a = attrs(e, offset)?;
                            it.enclosures.push(RawEnclosure {
                                url: get(&a, "url").map(str::to_string),
                                mime: get(&a, "type").map(str::to_string),
                                length: get(&a, "length").map(str::to_string),
                            });
                        }
                    }
                    (Flavor::Atom, "link") => {
                        if let Some(it) = item.as_mut() {
                            let a = attrs(e, offset)?;
                            if get(&a, "rel") == Some("enclosure") {
                                it.enclosures.push(RawEnclosure {
                                    url: get(&a, "href").map(str::to_string),
                                    mime: get(&a, "type").map(str::to_string),
                                    length: get(&a, "length").map(str::to_string),
                                });
                            } else if it.link.is_none() {
                                it.link = get(&a, "href").map(str::to_string);
                            }
                        }
                    }
                    _ => {}
                }
                if !is_empty {
                    stack.push(name);
                }
            }
            Event::End(ref e) => {
                let name = String::from_utf8_lossy(e.local_name().as_ref()).into_owned();
                stack.pop();
                if matches!(
                    (flavor, name.as_str()),
                    (Some(Flavor::Rss), "item") | (Some(Flavor::Atom), "entry")
                ) {
                    if let Some(it) = item.take() {
                        items.push(it);
                    }
                }
            }
            Event::Text(ref t) => {
                let text = t.unescape().map_err(|e| RssError::Malformed {
                    offset,
                    message: e.to_string(),
                })?;
                capture_text(&stack, flavor, item.as_mut(), text.trim());
            }
            Event::CData(ref t) => {
                let text = String::from_utf8_lossy(t.as_ref()).into_owned();
                capture_text(&stack, flavor, item.as_mut(), text.trim());
            }
            Event::Eof => {
                if !stack.is_empty() {
                    return Err(RssError::Malformed {
                        offset: reader.buffer_position(),
                        message: format!("unexpected end of document inside <{}>", stack.join("><")),
                    });
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }

    if flavor.is_none() {
        return Err(RssError::Format(String::new()));
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for it in items {
        for enc in it.enclosures {
            let Some(raw_url) = enc.url.as_deref().map(str::trim).filter(|u| !u.is_empty()) else {
                continue;
            };
            let url = match Url::parse(raw_url) {
                Ok(u) => u,
                Err(url::ParseError::RelativeUrlWithoutBase) => {
                    match base.as_ref().and_then(|b| b.join(raw_url).ok()) {
                        Some(u) => u,
                        None => continue,
                    }
                }
                Err(_) => continue,
            };
            let declared = enc.mime.unwrap_or_default().trim().to_string();
            if !is_audio(&declared, &url) {
                continue;
            }
            let mime_type = if declared.is_empty() {
                mime_for_extension(&url.path().to_ascii_lowercase())
                    .unwrap_or("audio/mpeg")
                    .to_string()
            } else {
                declared
            };
            let enclosure_url = url.to_string();
            if !seen.insert(enclosure_url.clone()) {
                continue;
            }
            let item_guid = it
                .guid
                .clone()
                .or_else(|| it.link.clone())
                .unwrap_or_else(|| enclosure_url.clone());
            out.push(EnclosureRecord {
                feed_url: feed_url.to_string(),
                item_guid,
                enclosure_url,
                mime_type,
                declared_length_bytes: enc.length.and_then(|l| l.trim().parse().ok()),
            });
        }
    }
    Ok(out)
}

fn capture_text(stack: &[String], flavor: Option<Flavor>, item: Option<&mut Item>, text: &str) {
    let (Some(item), Some(top)) = (item, stack.last()) else {
        return;
    };
    if text.is_empty() {
        return;
    }
    match (flavor, top.as_str()) {
        (Some(Flavor::Rss), "guid") | (Some(Flavor::Atom), "id") => {
            item.guid.get_or_insert_with(|| text.to_string());
        }
        (Some(Flavor::Rss), "link") => {
            item.link.get_or_insert_with(|| text.to_string());
        }
        _ => {}
    }
}
