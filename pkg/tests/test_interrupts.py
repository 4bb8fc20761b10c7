"""Interrupt lines: reservation, argument slots, coalescing, delivery."""

from __future__ import annotations

import threading
import time

import pytest

from devfsim.errors import LinesExhausted, UnknownLine
from devfsim.guest import ThreadState
from devfsim.interrupts import (
    InterruptEvent,
    InterruptFabric,
    PURPOSE_COMPLETION,
    PURPOSE_PAUSE_RESUME,
    SharedArgPage,
    purpose_notification,
)
from devfsim.memvirt import PhysMem
from devfsim.world import World


def make_fabric(n_lines=32):
    mem = PhysMem(4 * 4096)
    return InterruptFabric(guest_id=0, arg_page=SharedArgPage(mem, 1), n_lines=n_lines)


class TestReserveLine:
    def test_two_devices_get_distinct_lines(self):
        fabric = make_fabric()
        a = fabric.reserve_line(purpose_notification(1))
        b = fabric.reserve_line(purpose_notification(2))
        assert a != b

    def test_reservation_is_idempotent(self):
        fabric = make_fabric()
        assert fabric.reserve_line(PURPOSE_COMPLETION) == fabric.reserve_line(
            PURPOSE_COMPLETION)

    def test_exhaustion_past_line_count(self):
        fabric = make_fabric(n_lines=32)
        for device in range(32):
            fabric.reserve_line(purpose_notification(device))
        with pytest.raises(LinesExhausted):
            fabric.reserve_line(purpose_notification(99))


class TestInject:
    def test_unreserved_line_rejected(self):
        fabric = make_fabric()
        with pytest.raises(UnknownLine):
            fabric.inject(InterruptEvent(0, line=5))

    def test_arg_presence_must_match_line_kind(self):
        fabric = make_fabric()
        completion = fabric.reserve_line(PURPOSE_COMPLETION)
        notify = fabric.reserve_line(purpose_notification(1))
        with pytest.raises(ValueError):
            fabric.inject(InterruptEvent(0, completion))  # missing arg
        with pytest.raises(ValueError):
            fabric.inject(InterruptEvent(0, notify, arg=3))  # spurious arg

    def test_argless_injections_coalesce(self):
        fabric = make_fabric()
        line = fabric.reserve_line(purpose_notification(1))
        for _ in range(100):
            fabric.inject(InterruptEvent(0, line))
        deliveries = 0
        while True:
            fabric._stopped = False
            with fabric._cond:
                if not fabric._pending:
                    break
            fabric.next_pending()
            fabric.note_delivered(line)
            deliveries += 1
        assert 1 <= deliveries <= 100
        assert fabric.injected[line] == 100
        assert fabric.coalesced == 100 - deliveries

    def test_arg_passthrough_and_slot_clear(self):
        fabric = make_fabric()
        line = fabric.reserve_line(PURPOSE_COMPLETION)
        fabric.inject(InterruptEvent(0, line, arg=7))
        assert fabric.next_pending() == (line, True)
        assert fabric.consume_arg(line) == 7
        assert fabric._arg_page.read_and_clear(line) == 0  # cleared on read

    def test_argful_writer_waits_for_consumption(self):
        fabric = make_fabric()
        line = fabric.reserve_line(PURPOSE_COMPLETION)
        seen = []
        done = threading.Event()

        def writer():
            for value in range(5):
                fabric.inject(InterruptEvent(0, line, arg=value))
            done.set()

        t = threading.Thread(target=writer, daemon=True)
        t.start()
        for _ in range(5):
            item = fabric.next_pending()
            assert item == (line, True)
            time.sleep(0.01)  # let the writer try to race ahead
            seen.append(fabric.consume_arg(line))
        assert done.wait(5.0)
        assert seen == [0, 1, 2, 3, 4]  # no argument lost or fabricated


class TestDelivery:
    def test_handler_needs_a_free_vcpu_token(self):
        world = World()
        try:
            guest = world.add_guest(vcpus=1, mem_mode="shadow")
            device_line_purpose = purpose_notification(7)
            fabric = world.backend.fabrics[guest.id]
            line = fabric.reserve_line(device_line_purpose)
            process = world.new_process(guest)
            hog = world.new_thread(process, "hog")
            release = threading.Event()
            hog.start(lambda t: release.wait(5.0))  # holds the only token
            while hog.state is not ThreadState.RUNNING:
                time.sleep(0.001)
            fabric.inject(InterruptEvent(guest.id, line))
            time.sleep(0.15)
            assert fabric.delivered[line] == 0  # gated on the busy vCPU
            release.set()
            deadline = time.monotonic() + 5.0
            while fabric.delivered[line] == 0:
                assert time.monotonic() < deadline
                time.sleep(0.005)
            hog.join(5.0)
        finally:
            world.close()

    def test_no_argument_fabrication_end_to_end(self):
        world = World()
        try:
            guest = world.add_guest(vcpus=1, mem_mode="shadow")
            fabric = world.backend.fabrics[guest.id]
            line = fabric.line_for(PURPOSE_COMPLETION)
            world.frontends[guest.id]  # handler: unknown thread ids are dropped
            sent = [1000001, 1000002, 1000003]
            for arg in sent:
                fabric.inject(InterruptEvent(guest.id, line, arg=arg))
            deadline = time.monotonic() + 5.0
            while fabric.delivered[line] < len(sent):
                assert time.monotonic() < deadline
                time.sleep(0.005)
            delivered_args = [r.get("arg") for r in
                              world.log.records("interrupt_deliver", guest=guest.id)
                              if r.get("line") == line]
            assert delivered_args == sent
        finally:
            world.close()

    def test_pause_resume_line_reserved_per_guest(self):
        world = World()
        try:
            guest = world.add_guest()
            fabric = world.backend.fabrics[guest.id]
            assert fabric.line_for(PURPOSE_PAUSE_RESUME) != fabric.line_for(
                PURPOSE_COMPLETION)
        finally:
            world.close()
