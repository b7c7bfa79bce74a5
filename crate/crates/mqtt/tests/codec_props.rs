use energymon_mqtt::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, Packet,
    Publish, QoS, Subscription, TopicFilter,
};
use proptest::prelude::*;

fn segment() -> impl Strategy<Value = String> {
    "[a-z0-9_]{0,6}"
}

fn topic() -> impl Strategy<Value = String> {
    prop::collection::vec(segment(), 1..5)
        .prop_map(|s| s.join("/"))
        .prop_filter("non-empty", |t| !t.is_empty())
}

fn filter() -> impl Strategy<Value = TopicFilter> {
    (
        prop::collection::vec(prop_oneof![segment(), Just("+".to_string())], 1..5),
        any::<bool>(),
    )
        .prop_map(|(mut segs, hash)| {
            if hash {
                segs.push("#".into());
            }
            segs.join("/")
        })
        .prop_filter_map("non-empty", |f| TopicFilter::parse(&f).ok())
}

fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
}

fn packet() -> impl Strategy<Value = Packet> {
    prop_oneof![
        ("[ -~]{0,23}", any::<u16>()).prop_map(|(client_id, keepalive_s)| Packet::Connect {
            client_id,
            keepalive_s
        }),
        (0u8..=5).prop_map(|return_code| Packet::Connack { return_code }),
        (
            topic(),
            prop::collection::vec(any::<u8>(), 0..300),
            qos(),
            1u16..
        )
            .prop_map(|(topic, payload, qos, id)| Packet::Publish(Publish {
                topic,
                payload,
                qos,
                packet_id: (qos == QoS::AtLeastOnce).then_some(id),
            })),
        (1u16..).prop_map(|packet_id| Packet::Puback { packet_id }),
        (1u16.., prop::collection::vec((filter(), qos()), 1..4)).prop_map(|(packet_id, f)| {
            Packet::Subscribe {
                packet_id,
                filters: f
                    .into_iter()
                    .map(|(filter, qos)| Subscription { filter, qos })
                    .collect(),
            }
        }),
        (1u16.., prop::collection::vec(prop::option::of(qos()), 1..4))
            .prop_map(|(packet_id, granted)| Packet::Suback { packet_id, granted }),
        Just(Packet::Pingreq),
        Just(Packet::Pingresp),
        Just(Packet::Disconnect),
    ]
}

proptest! {
    #[test]
    fn codec_roundtrip(p in packet()) {
        let bytes = encode_packet(&p).unwrap();
        prop_assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
    }

    #[test]
    fn byte_at_a_time_framing(p in packet()) {
        let bytes = encode_packet(&p).unwrap();
        for end in 0..bytes.len() {
            prop_assert_eq!(decode_packet(&bytes[..end]).unwrap(), None);
        }
        prop_assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
    }

    #[test]
    fn varint_roundtrip(n in 0u32..=268_435_455) {
        let enc = encode_remaining_length(n).unwrap();
        prop_assert!((1..=4).contains(&enc.len()));
        prop_assert_eq!(decode_remaining_length(&enc).unwrap(), Some((n, enc.len())));
    }
}

#[test]
fn varint_boundaries() {
    let cases: [(u32, &[u8]); 8] = [
        (0, &[0x00]),
        (127, &[0x7F]),
        (128, &[0x80, 0x01]),
        (16_383, &[0xFF, 0x7F]),
        (16_384, &[0x80, 0x80, 0x01]),
        (2_097_151, &[0xFF, 0xFF, 0x7F]),
        (2_097_152, &[0x80, 0x80, 0x80, 0x01]),
        (268_435_455, &[0xFF, 0xFF, 0xFF, 0x7F]),
    ];
    for (n, bytes) in cases {
        assert_eq!(encode_remaining_length(n).unwrap(), bytes, "n={n}");
        assert_eq!(
            decode_remaining_length(bytes).unwrap(),
            Some((n, bytes.len()))
        );
    }
}
