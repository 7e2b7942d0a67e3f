"""Pcap reading and bidirectional TCP flow assembly.

Only classic microsecond pcap files with Ethernet II link type are
understood; frames are decapsulated Ethernet -> IPv4 -> TCP.  Anything
else is counted in :class:`CaptureStats` and skipped.
"""

from __future__ import annotations

import bisect
import csv
import enum
import heapq
import socket
import struct
from dataclasses import dataclass, field, replace

from .errors import CaptureParseError, UnsupportedFormatError

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
PROTO_TCP = 6
PROTO_UDP = 17

DEFAULT_IDLE_TIMEOUT = 64.0
DEFAULT_REORDER_WINDOW = 1.0

# records longer than this are treated as corruption
MAX_RECORD_LEN = 1 << 18


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


@dataclass(frozen=True)
class PacketSummary:
    ts_sec: int
    ts_usec: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    ip_header_len: int
    tcp_header_len: int
    payload_len: int
    tcp_flags: int
    total_len: int
    truncated: bool = False

    @property
    def ts_us(self):
        """Timestamp as integer microseconds; differences are exact."""
        return self.ts_sec * 1_000_000 + self.ts_usec

    @property
    def timestamp(self):
        return self.ts_sec + self.ts_usec * 1e-6

    @property
    def control_bytes(self):
        return self.ip_header_len + self.tcp_header_len

    def has(self, flag):
        return bool(self.tcp_flags & flag)

    def reversed(self):
        """Same packet with source and destination exchanged."""
        return replace(self, src_ip=self.dst_ip, dst_ip=self.src_ip,
                       src_port=self.dst_port, dst_port=self.src_port)


def _ip_order(ip):
    return socket.inet_aton(ip)


@dataclass(frozen=True, order=True)
class FlowKey:
    """Canonical 5-tuple: the lower (ip, port) endpoint comes first."""

    a_ip: str
    a_port: int
    b_ip: str
    b_port: int
    proto: int = PROTO_TCP

    @classmethod
    def of(cls, src_ip, src_port, dst_ip, dst_port, proto=PROTO_TCP):
        a = (_ip_order(src_ip), src_port, src_ip)
        b = (_ip_order(dst_ip), dst_port, dst_ip)
        if b < a:
            a, b = b, a
        return cls(a[2], a[1], b[2], b[1], proto)

    @classmethod
    def from_packet(cls, pkt):
        return cls.of(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port)

    def __str__(self):
        return f"{self.a_ip}:{self.a_port}<->{self.b_ip}:{self.b_port}/{self.proto}"


@dataclass
class FlowRecord:
    key: FlowKey
    client: tuple
    server: tuple
    packets: list
    from_client: list
    complete: bool = False
    flow_id: int = -1

    @property
    def start_us(self):
        return self.packets[0].ts_us

    @property
    def end_us(self):
        return self.packets[-1].ts_us

    @property
    def n_packets(self):
        return len(self.packets)

    def swapped(self):
        """The same flow with client and server roles exchanged."""
        return replace(self, client=self.server, server=self.client,
                       from_client=[not d for d in self.from_client])


@dataclass
class CaptureStats:
    records: int = 0
    accepted: int = 0
    ipv6: int = 0
    non_ipv4: int = 0
    non_tcp: int = 0
    malformed: int = 0
    truncated: int = 0

    @property
    def skipped(self):
        return self.non_ipv4 + self.non_tcp + self.malformed


class CaptureReader:
    """Iterate over the TCP/IPv4 packets of a pcap file.

    ``stats`` is filled in while iterating.
    """

    def __init__(self, path):
        self.path = path
        self.stats = CaptureStats()
        with open(path, "rb") as fh:
            self._endian, self.snaplen = self._parse_global_header(fh.read(24))

    @staticmethod
    def _parse_global_header(head):
        if len(head) < 24:
            raise UnsupportedFormatError("file too short for a pcap global header")
        if struct.unpack("<I", head[:4])[0] == PCAP_MAGIC:
            endian = "<"
        elif struct.unpack(">I", head[:4])[0] == PCAP_MAGIC:
            endian = ">"
        else:
            raise UnsupportedFormatError(f"bad pcap magic {head[:4].hex()}")
        _, _, _, _, snaplen, network = struct.unpack(endian + "HHiIII", head[4:24])
        if network != LINKTYPE_ETHERNET:
            raise UnsupportedFormatError(f"unsupported link type {network}")
        return endian, snaplen

    def __iter__(self):
        rec_fmt = self._endian + "IIII"
        with open(self.path, "rb") as fh:
            fh.seek(24)
            off = 24
            while True:
                hdr = fh.read(16)
                if not hdr:
                    return
                if len(hdr) < 16:
                    raise CaptureParseError("truncated record header", off)
                ts_sec, ts_usec, incl, orig = struct.unpack(rec_fmt, hdr)
                if incl > MAX_RECORD_LEN or ts_usec >= 1_000_000:
                    raise CaptureParseError("malformed record header", off)
                frame = fh.read(incl)
                if len(frame) < incl:
                    raise CaptureParseError("record data runs past end of file", off)
                off += 16 + incl
                self.stats.records += 1
                pkt = self._decode(ts_sec, ts_usec, frame, max(orig, incl))
                if pkt is not None:
                    self.stats.accepted += 1
                    if pkt.truncated:
                        self.stats.truncated += 1
                    yield pkt

    def _decode(self, ts_sec, ts_usec, frame, orig_len):
        stats = self.stats
        if len(frame) < 14:
            stats.malformed += 1
            return None
        ethertype = struct.unpack("!H", frame[12:14])[0]
        if ethertype != ETH_IPV4:
            if ethertype == ETH_IPV6:
                stats.ipv6 += 1
            stats.non_ipv4 += 1
            return None
        ip = frame[14:]
        if len(ip) < 20 or ip[0] >> 4 != 4:
            stats.malformed += 1
            return None
        ihl = (ip[0] & 0x0F) * 4
        total = struct.unpack("!H", ip[2:4])[0]
        frag = struct.unpack("!H", ip[6:8])[0] & 0x1FFF
        if ip[9] != PROTO_TCP:
            stats.non_tcp += 1
            return None
        if ihl < 20 or frag != 0 or len(ip) < ihl + 20:
            stats.malformed += 1
            return None
        tcp = ip[ihl:]
        thl = (tcp[12] >> 4) * 4
        if thl < 20 or total < ihl + thl or orig_len < 14 + total:
            stats.malformed += 1
            return None
        sport, dport = struct.unpack("!HH", tcp[:4])
        return PacketSummary(
            ts_sec=ts_sec, ts_usec=ts_usec,
            src_ip=socket.inet_ntoa(ip[12:16]), dst_ip=socket.inet_ntoa(ip[16:20]),
            src_port=sport, dst_port=dport,
            ip_header_len=ihl, tcp_header_len=thl, payload_len=total - ihl - thl,
            tcp_flags=tcp[13] & 0x3F, total_len=orig_len,
            truncated=len(frame) < orig_len)


def read_capture(path):
    """Open a pcap file; iterate the result for :class:`PacketSummary` items."""
    return CaptureReader(path)


@dataclass
class _FlowBuilder:
    key: FlowKey
    order: int
    packets: list = field(default_factory=list)
    times: list = field(default_factory=list)
    last_us: int = 0
    fin_from: set = field(default_factory=set)
    reset: bool = False

    @property
    def terminated(self):
        return self.reset or len(self.fin_from) == 2

    def add(self, pkt):
        at = bisect.bisect_right(self.times, pkt.ts_us)
        self.times.insert(at, pkt.ts_us)
        self.packets.insert(at, pkt)
        self.last_us = max(self.last_us, pkt.ts_us)
        if pkt.has(TcpFlags.RST):
            self.reset = True
        if pkt.has(TcpFlags.FIN):
            self.fin_from.add((pkt.src_ip, pkt.src_port))

    def build(self):
        pkts = self.packets
        syn = next((p for p in pkts if p.has(TcpFlags.SYN) and not p.has(TcpFlags.ACK)), None)
        synack = next((p for p in pkts if p.has(TcpFlags.SYN) and p.has(TcpFlags.ACK)), None)
        if syn is not None:
            client = (syn.src_ip, syn.src_port)
        elif synack is not None:
            client = (synack.dst_ip, synack.dst_port)
        else:
            client = (pkts[0].src_ip, pkts[0].src_port)
        server = (self.key.b_ip, self.key.b_port) \
            if client == (self.key.a_ip, self.key.a_port) else (self.key.a_ip, self.key.a_port)
        first = pkts[0]
        complete = (first.has(TcpFlags.SYN) and not first.has(TcpFlags.ACK)
                    and self.terminated)
        return FlowRecord(
            key=self.key, client=client, server=server, packets=list(pkts),
            from_client=[(p.src_ip, p.src_port) == client for p in pkts],
            complete=complete)


def _in_time_order(packets, window_us):
    heap = []
    seq = 0
    for pkt in packets:
        heapq.heappush(heap, (pkt.ts_us, seq, pkt))
        seq += 1
        horizon = pkt.ts_us - window_us
        while heap and heap[0][0] <= horizon:
            yield heapq.heappop(heap)[2]
    while heap:
        yield heapq.heappop(heap)[2]


def assemble_flows(packets, idle_timeout=DEFAULT_IDLE_TIMEOUT,
                   reorder_window=DEFAULT_REORDER_WINDOW):
    """Group packets into bidirectional flows.

    A key starts a new flow after ``idle_timeout`` seconds of silence, or
    when a SYN arrives after the current flow ended with FINs from both
    sides or an RST.  Packets are reordered within ``reorder_window``
    seconds.  Flows are returned in order of their first packet and
    numbered from 0.
    """
    timeout_us = round(idle_timeout * 1_000_000)
    window_us = round(reorder_window * 1_000_000)
    active = {}
    done = []
    order = 0
    for pkt in _in_time_order(packets, window_us):
        key = FlowKey.from_packet(pkt)
        st = active.get(key)
        if st is not None and (pkt.ts_us - st.last_us > timeout_us
                               or (st.terminated and pkt.has(TcpFlags.SYN))):
            done.append(st)
            st = None
        if st is None:
            st = active[key] = _FlowBuilder(key, order)
            order += 1
        st.add(pkt)
    done.extend(active.values())
    flows = [(b.packets[0].ts_us, b.order, b.build()) for b in done]
    flows.sort(key=lambda item: item[:2])
    out = []
    for i, (_, _, flow) in enumerate(flows):
        flow.flow_id = i
        out.append(flow)
    return out


def format_us(us):
    return f"{us // 1_000_000}.{us % 1_000_000:06d}"


FLOW_CSV_COLUMNS = ["flow_id", "start", "end", "client_ip", "client_port", "server_ip",
                    "server_port", "proto", "packets", "bytes", "complete"]


def write_flows_csv(path, flows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(FLOW_CSV_COLUMNS)
        for f in flows:
            out.writerow([f.flow_id, format_us(f.start_us), format_us(f.end_us),
                          f.client[0], f.client[1], f.server[0], f.server[1], f.key.proto,
                          f.n_packets, sum(p.total_len for p in f.packets), int(f.complete)])


# -- capture writing (fixtures, demos) ------------------------------------

def _checksum(data):
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def _ipv4_header(src_ip, dst_ip, proto, payload_len, ident=0, options=b""):
    ihl = 5 + len(options) // 4
    hdr = struct.pack("!BBHHHBBH4s4s", (4 << 4) | ihl, 0, ihl * 4 + payload_len, ident, 0,
                      64, proto, 0, socket.inet_aton(src_ip), socket.inet_aton(dst_ip))
    hdr += options
    return hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]


def _ethernet(ethertype):
    return b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ethertype)


def encode_tcp_frame(src_ip, dst_ip, src_port, dst_port, flags, payload=b"",
                     seq=0, ack=0, tcp_options=b"", ip_options=b""):
    """Ethernet/IPv4/TCP frame bytes; options must be multiples of 4 bytes."""
    if isinstance(payload, int):
        payload = bytes(payload)
    thl = 5 + len(tcp_options) // 4
    tcp = struct.pack("!HHIIBBHHH", src_port, dst_port, seq, ack, thl << 4, int(flags),
                      65535, 0, 0) + tcp_options
    ip = _ipv4_header(src_ip, dst_ip, PROTO_TCP, len(tcp) + len(payload), options=ip_options)
    return _ethernet(ETH_IPV4) + ip + tcp + payload


def encode_udp_frame(src_ip, dst_ip, src_port, dst_port, payload=b""):
    udp = struct.pack("!HHHH", src_port, dst_port, 8 + len(payload), 0) + payload
    return _ethernet(ETH_IPV4) + _ipv4_header(src_ip, dst_ip, PROTO_UDP, len(udp)) + udp


def encode_ipv6_frame(payload=b"\0" * 40):
    return _ethernet(ETH_IPV6) + payload


def write_capture(path, records, snaplen=65535):
    """Write ``(ts_sec, ts_usec, frame[, orig_len])`` records as little-endian pcap."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        for rec in records:
            ts_sec, ts_usec, frame = rec[:3]
            orig = rec[3] if len(rec) > 3 else len(frame)
            fh.write(struct.pack("<IIII", ts_sec, ts_usec, len(frame), orig))
            fh.write(frame)
