//! Downloading and verifying the MNIST files.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use log::info;
use sha2::{Digest, Sha256};

use elm_lda::{Error, Result};

/// File name and SHA-256 of its uncompressed contents.
pub type Checksum<'a> = (&'a str, &'a str);

/// The four MNIST files, hashed after decompression.
pub const MNIST_SHA256: [Checksum<'static>; 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// Where to get the files from.
#[derive(Debug, Clone)]
pub enum Source {
    /// Base URL; `<url>/<name>.gz` is requested for each file.
    Mirror(String),
    /// Directory holding `<name>` or `<name>.gz`.
    Local(PathBuf),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn gunzip_if_needed(bytes: Vec<u8>, origin: &str) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Io {
                path: origin.into(),
                source: e,
            })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn download(url: &str) -> Result<Vec<u8>> {
    let net = |e: ureq::Error| Error::Io {
        path: url.into(),
        source: std::io::Error::other(e),
    };
    let resp = ureq::get(url).call().map_err(net)?;
    let mut bytes = Vec::new();
    resp.into_body()
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Io {
            path: url.into(),
            source: e,
        })?;
    Ok(bytes)
}

fn fetch_one(source: &Source, name: &str) -> Result<(Vec<u8>, String)> {
    match source {
        Source::Mirror(base) => {
            let url = format!("{}/{name}.gz", base.trim_end_matches('/'));
            info!("downloading {url}");
            let bytes = download(&url)?;
            Ok((gunzip_if_needed(bytes, &url)?, url))
        }
        Source::Local(dir) => {
            let path = elm_lda::dataio::find_mnist_file(dir, name)
                .ok_or_else(|| Error::format(dir.join(name), "neither the file nor a .gz version exists"))?;
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let origin = path.display().to_string();
            Ok((gunzip_if_needed(bytes, &origin)?, origin))
        }
    }
}

/// Makes `dest` hold every file in `checksums`, uncompressed and verified.
/// Files already present with the right hash are left alone. Returns the
/// paths of all files.
pub fn fetch_data(dest: &Path, source: &Source, checksums: &[Checksum]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    let mut paths = Vec::with_capacity(checksums.len());
    for &(name, expected) in checksums {
        let target = dest.join(name);
        if let Ok(existing) = std::fs::read(&target) {
            if sha256_hex(&existing) == expected {
                info!("{} already present", target.display());
                paths.push(target);
                continue;
            }
        }
        let (bytes, origin) = fetch_one(source, name)?;
        let got = sha256_hex(&bytes);
        if got != expected {
            return Err(Error::format(
                origin,
                format!("SHA-256 of {name} is {got}, expected {expected}"),
            ));
        }
        let tmp = dest.join(format!(".{name}.part"));
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        info!("wrote {} ({} bytes)", target.display(), bytes.len());
        paths.push(target);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut e = GzEncoder::new(Vec::new(), Compression::default());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    }

    /// Serves `files` (path -> body) over HTTP/1.1 on an ephemeral port.
    fn serve(files: Vec<(String, Vec<u8>)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = stream.unwrap();
                let mut line = String::new();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                reader.read_line(&mut line).unwrap();
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                        break;
                    }
                }
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                match files.iter().find(|(p, _)| *p == path) {
                    Some((_, body)) => {
                        write!(
                            stream,
                            "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                            body.len()
                        )
                        .unwrap();
                        stream.write_all(body).unwrap();
                    }
                    None => {
                        stream
                            .write_all(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
                            .unwrap();
                    }
                }
            }
        });
        format!("http://{addr}/mnist/")
    }

    fn hashes() -> [String; 2] {
        [sha256_hex(b"alpha"), sha256_hex(b"beta")]
    }

    fn table(h: &[String; 2]) -> [Checksum<'_>; 2] {
        [("a-idx1-ubyte", &h[0]), ("b-idx1-ubyte", &h[1])]
    }

    #[test]
    fn mirror_download_verified() {
        let url = serve(vec![
            ("/mnist/a-idx1-ubyte.gz".into(), gz(b"alpha")),
            ("/mnist/b-idx1-ubyte.gz".into(), gz(b"beta")),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let paths = fetch_data(dir.path(), &Source::Mirror(url), &table(&hashes())).unwrap();
        assert_eq!(std::fs::read(&paths[0]).unwrap(), b"alpha");
        assert_eq!(std::fs::read(&paths[1]).unwrap(), b"beta");
        // Second run needs no source at all.
        let offline = Source::Mirror("http://127.0.0.1:9/".into());
        fetch_data(dir.path(), &offline, &table(&hashes())).unwrap();
    }

    #[test]
    fn checksum_mismatch_rejected() {
        let url = serve(vec![
            ("/mnist/a-idx1-ubyte.gz".into(), gz(b"alphA")),
            ("/mnist/b-idx1-ubyte.gz".into(), gz(b"beta")),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let err = fetch_data(dir.path(), &Source::Mirror(url), &table(&hashes())).unwrap_err();
        assert!(err.is_data());
        assert!(err.to_string().contains("SHA-256"), "{err}");
        assert!(!dir.path().join("a-idx1-ubyte").exists());
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let url = serve(vec![]);
        let dir = tempfile::tempdir().unwrap();
        let err = fetch_data(dir.path(), &Source::Mirror(url), &table(&hashes())).unwrap_err();
        assert!(err.is_data(), "{err}");
    }

    #[test]
    fn local_directory_plain_or_gz() {
        let src = tempfile::tempdir().unwrap();
        std::fs::write(src.path().join("a-idx1-ubyte"), b"alpha").unwrap();
        std::fs::write(src.path().join("b-idx1-ubyte.gz"), gz(b"beta")).unwrap();
        let dest = tempfile::tempdir().unwrap();
        let paths = fetch_data(dest.path(), &Source::Local(src.path().into()), &table(&hashes())).unwrap();
        assert_eq!(std::fs::read(&paths[1]).unwrap(), b"beta");
    }
}
