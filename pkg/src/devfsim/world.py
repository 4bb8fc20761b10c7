"""Composition root wiring one simulated machine together."""

from __future__ import annotations

import threading

from .backend import Backend
from .clock import ScaledRealClock, VirtualClock
from .devices import ClassDriver, Device
from .eventlog import EventLog
from .frontend import Frontend
from .guest import Guest, GuestProcess, GuestThread
from .hypercall import HypercallChannel, VcpuRegistry
from .interrupts import GuestInterruptController, InterruptFabric, SharedArgPage
from .memvirt import MemoryVirtualizer


class World:
    """One host plus its guests, devices, and forwarding machinery."""

    def __init__(self, *, clock: VirtualClock | None = None,
                 host_bytes: int = MemoryVirtualizer.DEFAULT_HOST_BYTES,
                 has_mode: str = "software"):
        self.clock = clock or ScaledRealClock(scale=1.0)
        self.memv = MemoryVirtualizer(host_bytes)
        self.registry = VcpuRegistry()
        self.log = EventLog(self.clock)
        self.class_driver = ClassDriver()
        self.backend = Backend(self.memv, self.registry, self.class_driver,
                               self.log, self.clock, has_mode=has_mode)
        self.channel = HypercallChannel(self.backend.dispatch, self.registry,
                                        holder_check=self._caller_holds_vcpu)
        self.guests: dict[int, Guest] = {}
        self.frontends: dict[int, Frontend] = {}
        self._controllers: list[GuestInterruptController] = []
        self._next_guest = 0
        self._next_vcpu = 0

    def _caller_holds_vcpu(self, vcpu: int) -> bool:
        guest = self.guests.get(self.registry.guest_of(vcpu))
        holder = guest.holder_of(vcpu) if guest else None
        return isinstance(holder, GuestThread) and holder._py is threading.current_thread()

    def add_guest(self, vcpus: int = 1, mem_mode: str = "shadow",
                  mem_bytes: int = MemoryVirtualizer.DEFAULT_GUEST_BYTES) -> Guest:
        guest_id = self._next_guest
        self._next_guest += 1
        memory = self.memv.add_guest(guest_id, mem_mode, mem_bytes)
        vcpu_ids = list(range(self._next_vcpu, self._next_vcpu + vcpus))
        self._next_vcpu += vcpus
        for vcpu in vcpu_ids:
            self.registry.register_vcpu(vcpu, guest_id)
        guest = Guest(guest_id, vcpu_ids, memory)
        arg_page = SharedArgPage(memory.mem, memory.os_alloc.alloc())
        fabric = InterruptFabric(guest_id, arg_page, log=self.log)
        self.backend.register_guest(guest, fabric)
        frontend = Frontend(guest, self.channel, fabric, self.memv, self.backend, self.log)
        controller = GuestInterruptController(guest, fabric, frontend.handle_interrupt,
                                              self.log)
        controller.start()
        self._controllers.append(controller)
        self.guests[guest_id] = guest
        self.frontends[guest_id] = frontend
        return guest

    def add_device(self, device: Device, guest_ids: list[int] | None = None) -> Device:
        self.class_driver.register(device, self.memv.host_mem, self.memv.host_alloc)
        for guest_id in guest_ids if guest_ids is not None else list(self.guests):
            self.backend.register_device_for_guest(guest_id, device.device_id)
            frontend = self.frontends[guest_id]
            frontend.mount(f"/dev/{device.name}", device.device_id)
            frontend.export_device_info(device.device_id, device.info_blob())
        return device

    def new_process(self, guest: Guest) -> GuestProcess:
        space = self.memv.create_process(guest.memory)
        self.backend.register_process(guest, space)
        return guest.add_process(space)

    def new_thread(self, process: GuestProcess, name: str = "") -> GuestThread:
        return process.guest.new_thread(process, name)

    def map_buffer(self, process: GuestProcess, gva: int, n_pages: int = 1) -> int:
        """Map an ordinary data buffer into the process at ``gva``."""
        self.memv.map_region(process.space, gva, n_pages)
        return gva

    def set_mode(self, guest: Guest, device: Device, mode: str) -> None:
        self.backend.set_mode(guest.id, device.device_id, mode)

    def close(self) -> None:
        self.channel.close()
        self.backend.shutdown()
        for controller in self._controllers:
            controller.stop()
