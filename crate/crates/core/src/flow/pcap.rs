//! Classic libpcap file reader, just deep enough to recover the directed
//! five-tuple and transport payload length of each TCP/UDP packet.
//!
//! Handles both file endiannesses (magic 0xa1b2c3d4 / 0xd4c3b2a1), Ethernet
//! and raw-IP link types, one optional VLAN tag, IPv4 and fixed-header IPv6.
//! Anything else (non-IP frames, other transports, IPv6 extension headers,
//! captures truncated before the transport header) is counted and skipped.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use serde::Serialize;

use super::{FlowError, PacketEvent, Transport};

const MAGIC_US: u32 = 0xa1b2_c3d4;
const MAGIC_US_SWAPPED: u32 = 0xd4c3_b2a1;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW_IP: u32 = 101;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;

const PROTO_TCP: u8 = 6;
const PROTO_UDP: u8 = 17;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PcapStats {
    pub packets: usize,
    pub events: usize,
    pub skipped_non_ip: usize,
    pub skipped_non_transport: usize,
    pub skipped_truncated: usize,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    little_endian: bool,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FlowError> {
        if self.pos + n > self.data.len() {
            return Err(FlowError::Pcap(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FlowError> {
        let b = self.take(2)?;
        let v = u16::from_le_bytes([b[0], b[1]]);
        Ok(if self.little_endian { v } else { v.swap_bytes() })
    }

    fn u32(&mut self) -> Result<u32, FlowError> {
        let b = self.take(4)?;
        let v = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        Ok(if self.little_endian { v } else { v.swap_bytes() })
    }

    fn done(&self) -> bool {
        self.pos >= self.data.len()
    }
}

/// Parse a classic pcap byte buffer into packet events, in file order.
pub fn parse_pcap(data: &[u8]) -> Result<(Vec<PacketEvent>, PcapStats), FlowError> {
    if data.len() < 24 {
        return Err(FlowError::Pcap("file shorter than the 24-byte global header".into()));
    }
    let magic = u32::from_le_bytes([data[0], data[1], data[2], data[3]]);
    // Magic read as LE tells us the writer byte order directly.
    let little_endian = match magic {
        MAGIC_US => true,
        MAGIC_US_SWAPPED => false,
        other => {
            return Err(FlowError::Pcap(format!("unknown pcap magic 0x{other:08x}")));
        }
    };
    let mut cur = Cursor { data, pos: 4, little_endian };
    let _version_major = cur.u16()?;
    let _version_minor = cur.u16()?;
    let _thiszone = cur.u32()?;
    let _sigfigs = cur.u32()?;
    let _snaplen = cur.u32()?;
    let linktype = cur.u32()?;
    if linktype != LINKTYPE_ETHERNET && linktype != LINKTYPE_RAW_IP {
        return Err(FlowError::Pcap(format!("unsupported link type {linktype}")));
    }

    let mut events = Vec::new();
    let mut stats = PcapStats::default();
    while !cur.done() {
        let ts_sec = cur.u32()? as i64;
        let ts_usec = cur.u32()? as i64;
        let incl_len = cur.u32()? as usize;
        let _orig_len = cur.u32()?;
        let frame = cur.take(incl_len)?;
        stats.packets += 1;
        let ts_us = ts_sec * 1_000_000 + ts_usec;
        match decode_frame(frame, linktype, ts_us, &mut stats) {
            Some(ev) => {
                stats.events += 1;
                events.push(ev);
            }
            None => {}
        }
    }
    Ok((events, stats))
}

/// Read and parse a pcap file from disk.
pub fn read_pcap_events(path: &Path) -> Result<(Vec<PacketEvent>, PcapStats), FlowError> {
    let data = std::fs::read(path)?;
    parse_pcap(&data)
}

fn decode_frame(
    frame: &[u8],
    linktype: u32,
    ts_us: i64,
    stats: &mut PcapStats,
) -> Option<PacketEvent> {
    let ip = match linktype {
        LINKTYPE_ETHERNET => {
            if frame.len() < 14 {
                stats.skipped_truncated += 1;
                return None;
            }
            let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
            let mut off = 14;
            if ethertype == ETHERTYPE_VLAN {
                if frame.len() < 18 {
                    stats.skipped_truncated += 1;
                    return None;
                }
                ethertype = u16::from_be_bytes([frame[16], frame[17]]);
                off = 18;
            }
            match ethertype {
                ETHERTYPE_IPV4 | ETHERTYPE_IPV6 => &frame[off..],
                _ => {
                    stats.skipped_non_ip += 1;
                    return None;
                }
            }
        }
        LINKTYPE_RAW_IP => frame,
        _ => unreachable!("link type checked at header"),
    };
    if ip.is_empty() {
        stats.skipped_truncated += 1;
        return None;
    }
    match ip[0] >> 4 {
        4 => decode_ipv4(ip, ts_us, stats),
        6 => decode_ipv6(ip, ts_us, stats),
        _ => {
            stats.skipped_non_ip += 1;
            None
        }
    }
}

fn decode_ipv4(ip: &[u8], ts_us: i64, stats: &mut PcapStats) -> Option<PacketEvent> {
    if ip.len() < 20 {
        stats.skipped_truncated += 1;
        return None;
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    let proto = ip[9];
    if ihl < 20 || total_len < ihl {
        stats.skipped_truncated += 1;
        return None;
    }
    let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
    decode_transport(&ip[ihl..], proto, total_len - ihl, src, dst, ts_us, stats)
}

fn decode_ipv6(ip: &[u8], ts_us: i64, stats: &mut PcapStats) -> Option<PacketEvent> {
    if ip.len() < 40 {
        stats.skipped_truncated += 1;
        return None;
    }
    let payload_len = u16::from_be_bytes([ip[4], ip[5]]) as usize;
    let next_header = ip[6];
    let mut s = [0u8; 16];
    s.copy_from_slice(&ip[8..24]);
    let mut d = [0u8; 16];
    d.copy_from_slice(&ip[24..40]);
    let src = IpAddr::V6(Ipv6Addr::from(s));
    let dst = IpAddr::V6(Ipv6Addr::from(d));
    // Extension headers are out of scope; only direct TCP/UDP is decoded.
    decode_transport(&ip[40..], next_header, payload_len, src, dst, ts_us, stats)
}

fn decode_transport(
    seg: &[u8],
    proto: u8,
    ip_payload_len: usize,
    src: IpAddr,
    dst: IpAddr,
    ts_us: i64,
    stats: &mut PcapStats,
) -> Option<PacketEvent> {
    let (transport, header_len) = match proto {
        PROTO_TCP => {
            if seg.len() < 13 {
                stats.skipped_truncated += 1;
                return None;
            }
            (Transport::Tcp, ((seg[12] >> 4) as usize) * 4)
        }
        PROTO_UDP => {
            if seg.len() < 8 {
                stats.skipped_truncated += 1;
                return None;
            }
            (Transport::Udp, 8)
        }
        _ => {
            stats.skipped_non_transport += 1;
            return None;
        }
    };
    if seg.len() < 4 || ip_payload_len < header_len {
        stats.skipped_truncated += 1;
        return None;
    }
    let src_port = u16::from_be_bytes([seg[0], seg[1]]);
    let dst_port = u16::from_be_bytes([seg[2], seg[3]]);
    Some(PacketEvent {
        ts_us,
        src_addr: src,
        src_port,
        dst_addr: dst,
        dst_port,
        transport,
        payload_len: (ip_payload_len - header_len) as u32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Test-side pcap builder, written from the file format itself so the
    // parser is checked against an independent encoding.
    pub(crate) struct PcapBuilder {
        big_endian: bool,
        buf: Vec<u8>,
    }

    impl PcapBuilder {
        pub fn new(big_endian: bool) -> Self {
            let mut b = PcapBuilder { big_endian, buf: Vec::new() };
            b.word32(MAGIC_US);
            b.word16(2);
            b.word16(4);
            b.word32(0);
            b.word32(0);
            b.word32(65535);
            b.word32(LINKTYPE_ETHERNET);
            b
        }

        fn word16(&mut self, v: u16) {
            let bytes = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            self.buf.extend_from_slice(&bytes);
        }

        fn word32(&mut self, v: u32) {
            let bytes = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            self.buf.extend_from_slice(&bytes);
        }

        pub fn tcp_packet(
            &mut self,
            ts_us: i64,
            src: [u8; 4],
            sport: u16,
            dst: [u8; 4],
            dport: u16,
            payload: usize,
        ) {
            let tcp_len = 20 + payload;
            let ip_total = 20 + tcp_len;
            let mut frame = Vec::new();
            frame.extend_from_slice(&[0u8; 12]); // MACs
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            // IPv4 header
            frame.push(0x45);
            frame.push(0);
            frame.extend_from_slice(&(ip_total as u16).to_be_bytes());
            frame.extend_from_slice(&[0, 0, 0, 0]); // id, flags
            frame.push(64); // ttl
            frame.push(PROTO_TCP);
            frame.extend_from_slice(&[0, 0]); // checksum
            frame.extend_from_slice(&src);
            frame.extend_from_slice(&dst);
            // TCP header (20 bytes, data offset 5)
            frame.extend_from_slice(&sport.to_be_bytes());
            frame.extend_from_slice(&dport.to_be_bytes());
            frame.extend_from_slice(&[0u8; 8]); // seq, ack
            frame.push(5 << 4);
            frame.push(0x18); // flags
            frame.extend_from_slice(&[0u8; 4]); // window, checksum-hi
            frame.extend_from_slice(&[0u8; 2]);
            frame.extend(std::iter::repeat(0xaa).take(payload));

            self.word32((ts_us / 1_000_000) as u32);
            self.word32((ts_us % 1_000_000) as u32);
            self.word32(frame.len() as u32);
            self.word32(frame.len() as u32);
            self.buf.extend_from_slice(&frame);
        }

        pub fn bytes(self) -> Vec<u8> {
            self.buf
        }
    }

    #[test]
    fn parses_both_endiannesses() {
        for big in [false, true] {
            let mut b = PcapBuilder::new(big);
            b.tcp_packet(1_000_000, [10, 0, 0, 1], 50000, [10, 0, 0, 2], 443, 120);
            b.tcp_packet(1_500_000, [10, 0, 0, 2], 443, [10, 0, 0, 1], 50000, 900);
            let (events, stats) = parse_pcap(&b.bytes()).unwrap();
            assert_eq!(stats.packets, 2);
            assert_eq!(events.len(), 2);
            assert_eq!(events[0].payload_len, 120);
            assert_eq!(events[0].src_port, 50000);
            assert_eq!(events[1].payload_len, 900);
            assert_eq!(events[1].ts_us, 1_500_000);
        }
    }

    #[test]
    fn rejects_unknown_magic() {
        let mut data = vec![0u8; 24];
        data[0..4].copy_from_slice(&0xdeadbeefu32.to_le_bytes());
        assert!(matches!(parse_pcap(&data), Err(FlowError::Pcap(_))));
    }

    #[test]
    fn rejects_truncated_record() {
        let mut b = PcapBuilder::new(false);
        b.tcp_packet(0, [1, 1, 1, 1], 1, [2, 2, 2, 2], 2, 10);
        let mut bytes = b.bytes();
        bytes.truncate(bytes.len() - 5);
        assert!(parse_pcap(&bytes).is_err());
    }

    #[test]
    fn zero_payload_event_preserved_for_assembler() {
        let mut b = PcapBuilder::new(false);
        b.tcp_packet(0, [10, 0, 0, 1], 50000, [10, 0, 0, 2], 443, 0);
        let (events, _) = parse_pcap(&b.bytes()).unwrap();
        assert_eq!(events[0].payload_len, 0);
    }
}
